"""Command-line interface.

Exit codes: 0 on success, 1 on usage/config errors, 2 on data errors
(malformed or inconsistent input files).
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .dpo import DpoConfig, TrainHandles, train
from .evaluate import DecodingConfig, evaluate_policy, report_both_modes
from .io_utils import (
    ConfigError,
    DataError,
    dump_json,
    sha256_file,
    sub_rng,
    write_jsonl,
)
from .lexicon import extract_mentions, load_lexicon, starter_lexicon_path
from .metrics import aggregate, load_detections, score_sample
from .pipeline import config_from_dict, config_from_file, run_pipeline
from .preference import (
    load_completions,
    load_dataset,
    provenance_record,
    rank_pair,
    save_dataset,
    BuildConfig,
    PreferenceDataset,
    Provenance,
)
from .reporting import render_report
from .toy_world import load_policy, save_policy, scenes_from_detections


class CliParser(argparse.ArgumentParser):
    # usage problems are exit code 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
    parser.add_argument(
        "--lexicon",
        type=Path,
        default=None,
        help="lexicon JSON (default: bundled starter lexicon)",
    )
    parser.add_argument("--out", type=Path, required=True, help="output file or directory")
    parser.add_argument(
        "--jobs", type=int, default=1, help="worker processes for scoring (default 1)"
    )


def _load_lexicon_arg(args) -> tuple:
    path = args.lexicon if args.lexicon else starter_lexicon_path()
    return load_lexicon(path), path


def _read_texts(path: Path) -> list[tuple[str, str]]:
    """(sample_id, text) rows from a .jsonl file or plain text lines."""
    from .io_utils import read_jsonl

    rows: list[tuple[str, str]] = []
    if path.suffix == ".jsonl":
        for lineno, rec in read_jsonl(path):
            text = rec.get("text", rec.get("response"))
            if text is None:
                raise DataError(f"{path}: line {lineno}: need a 'text' or 'response' field")
            rows.append((str(rec.get("sample_id", lineno)), str(text)))
    else:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                rows.append((str(lineno), line.rstrip("\n")))
    return rows


_WORKER_LEXICON = None


def _worker_init(lexicon):
    global _WORKER_LEXICON
    _WORKER_LEXICON = lexicon


def _worker_extract(text: str):
    return extract_mentions(text, _WORKER_LEXICON)


def _extract_all(texts: list[str], lexicon, jobs: int) -> list[list]:
    """Mention lists for each text, optionally across worker processes."""
    if jobs <= 1 or len(texts) < 2:
        return [extract_mentions(t, lexicon) for t in texts]
    with ProcessPoolExecutor(
        max_workers=jobs, initializer=_worker_init, initargs=(lexicon,)
    ) as pool:
        return list(pool.map(_worker_extract, texts, chunksize=64))


# ============================================================
# Subcommands
# ============================================================


def cmd_extract(args) -> int:
    lexicon, _ = _load_lexicon_arg(args)
    rows = _read_texts(args.input)
    mentions = _extract_all([text for _, text in rows], lexicon, args.jobs)
    write_jsonl(
        args.out,
        (
            {
                "sample_id": sid,
                "mentions": [
                    {"class": m.canonical, "start": m.start, "end": m.end} for m in ms
                ],
            }
            for (sid, _), ms in zip(rows, mentions)
        ),
    )
    print(f"extracted mentions for {len(rows)} lines -> {args.out}")
    return 0


def cmd_score(args) -> int:
    lexicon, lexicon_path = _load_lexicon_arg(args)
    truths = load_detections(args.detections, lexicon)
    rows = []
    from .io_utils import read_jsonl

    for lineno, rec in read_jsonl(args.responses):
        if "image_id" not in rec:
            raise DataError(f"{args.responses}: line {lineno}: missing 'image_id'")
        text = rec.get("response", rec.get("text"))
        if text is None:
            raise DataError(
                f"{args.responses}: line {lineno}: need a 'response' or 'text' field"
            )
        image_id = str(rec["image_id"])
        if image_id not in truths:
            raise DataError(
                f"{args.responses}: line {lineno}: image_id {image_id!r} "
                "has no detection record"
            )
        rows.append((str(rec.get("sample_id", lineno)), image_id, str(text)))

    mentions = _extract_all([t for _, _, t in rows], lexicon, args.jobs)
    scores = [
        score_sample(sid, ms, truths[img], lexicon)
        for (sid, img, _), ms in zip(rows, mentions)
    ]
    report = aggregate(
        scores, args.aggregation, has_targets=bool(lexicon.hallucinatory_targets)
    )
    doc = report.to_dict(include_per_sample=args.per_sample)
    doc["run"] = {
        "command": "score",
        "aggregation": args.aggregation,
        "lexicon": str(lexicon_path),
        "inputs": {
            str(args.responses): sha256_file(args.responses),
            str(args.detections): sha256_file(args.detections),
            str(lexicon_path): sha256_file(lexicon_path),
        },
    }
    dump_json(args.out, doc)
    print(
        f"scored {report.n_samples} responses: chair_i={report.chair_i:.4f} "
        f"chair_s={report.chair_s:.4f} ({args.aggregation}) -> {args.out}"
    )
    return 0


def cmd_build_prefs(args) -> int:
    lexicon, _ = _load_lexicon_arg(args)
    truths = load_detections(args.detections, lexicon)
    items = load_completions(args.completions)
    pairs = []
    n_ties = 0
    for context, (y1, y2) in items:
        if context.image_id not in truths:
            raise DataError(
                f"sample {context.sample_id!r}: image_id {context.image_id!r} "
                "has no detection record"
            )
        pair = rank_pair(
            y1, y2, context, truths[context.image_id], lexicon,
            filter_ties=not args.no_filter,
        )
        if pair is not None:
            n_ties += 1 if pair.is_tie else 0
            pairs.append(pair)
    pairs.sort(key=lambda p: p.context.sample_id)
    dataset = PreferenceDataset(
        pairs=pairs,
        provenance=Provenance(
            policy_id="external", temperature=0.0, seed=args.seed
        ),
        n_source=len(items),
        n_filtered=len(items) - len(pairs),
    )
    save_dataset(dataset, args.out)
    dump_json(Path(str(args.out) + ".provenance.json"), provenance_record(dataset))
    msg = f"built {len(pairs)} pairs from {len(items)} candidates "
    msg += f"(filtered {dataset.n_filtered} ties)" if not args.no_filter else f"(kept {n_ties} ties, first completion wins)"
    print(msg + f" -> {args.out}")
    return 0


def cmd_train(args) -> int:
    lexicon, _ = _load_lexicon_arg(args)
    reference = load_policy(args.reference)
    truths = load_detections(args.detections, lexicon)
    scene_list = scenes_from_detections(truths, list(reference.classes))
    scenes = {s.image_id: s for s in scene_list}
    train_set = load_dataset(args.train_pairs)
    val_set = load_dataset(args.val_pairs)
    for pair in train_set.pairs + val_set.pairs:
        if pair.context.image_id not in scenes:
            raise DataError(
                f"pair {pair.context.sample_id!r}: image_id "
                f"{pair.context.image_id!r} has no detection record"
            )
    config = DpoConfig(
        beta=args.beta,
        peak_lr=args.peak_lr,
        warmup_steps=args.warmup_steps,
        total_steps=args.steps,
        batch_size=args.batch_size,
        validation_every=args.validation_every,
        seed=args.seed,
    )
    val_items = [(p.context.sample_id, scenes[p.context.image_id]) for p in val_set.pairs]
    handles = TrainHandles(scenes=scenes, validation=val_items, lexicon=lexicon)
    result, _ = train(train_set, config, reference, handles)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    save_policy(result.final, out / "policy_final.json", meta={"role": "final"})
    save_policy(
        result.best, out / "policy_best.json",
        meta={"role": "best", "step": result.best_step},
    )
    write_jsonl(out / "train_log.jsonl", result.log)
    dump_json(
        out / "train_summary.json",
        {
            "config": config.to_dict(),
            "best_step": result.best_step,
            "best_validation_chair_i": result.best_validation_chair_i,
            "final_kl_estimate": result.log[-1]["kl_estimate"],
            "inputs": {
                str(args.train_pairs): sha256_file(args.train_pairs),
                str(args.val_pairs): sha256_file(args.val_pairs),
                str(args.detections): sha256_file(args.detections),
                str(args.reference): sha256_file(args.reference),
            },
        },
    )
    print(
        f"trained {config.total_steps} steps; best val chair_i "
        f"{result.best_validation_chair_i:.4f} at step {result.best_step} -> {out}"
    )
    return 0


def cmd_eval(args) -> int:
    lexicon, lexicon_path = _load_lexicon_arg(args)
    policy = load_policy(args.policy)
    truths = load_detections(args.detections, lexicon)
    scene_list = scenes_from_detections(truths, list(policy.classes))
    items = [(s.image_id, s) for s in scene_list]
    decoding = DecodingConfig(
        mode=args.decoding, temperature=args.temperature, max_length=args.max_length
    )
    rng = sub_rng(args.seed, "eval") if decoding.mode == "sample" else None
    scores, completions = evaluate_policy(policy, items, lexicon, decoding, rng)
    report = aggregate(
        scores, args.aggregation, has_targets=bool(lexicon.hallucinatory_targets)
    )
    doc = report.to_dict(include_per_sample=args.per_sample)
    doc["run"] = {
        "command": "eval",
        "decoding": decoding.to_dict(),
        "aggregation": args.aggregation,
        "seed": args.seed,
        "inputs": {
            str(args.policy): sha256_file(args.policy),
            str(args.detections): sha256_file(args.detections),
            str(lexicon_path): sha256_file(lexicon_path),
        },
    }
    dump_json(args.out, doc)
    if args.completions_out:
        write_jsonl(
            args.completions_out,
            (
                {"sample_id": sid, "image_id": scene.image_id, "response": text}
                for (sid, scene), text in zip(items, completions)
            ),
        )
    print(
        f"evaluated {report.n_samples} scenes: chair_i={report.chair_i:.4f} "
        f"chair_s={report.chair_s:.4f} ({args.aggregation}) -> {args.out}"
    )
    return 0


def cmd_pipeline(args) -> int:
    overrides = {
        "seed": args.seed,
        "beta": args.beta,
        "temperature": args.temperature,
        "holdout": args.holdout,
        "rounds": args.rounds,
        "total_steps": args.steps,
        "n_dialogues": args.dialogues,
        "n_pretrain_captions": args.pretrain_captions,
        "p_h": args.p_h,
    }
    if args.no_filter:
        overrides["filter_ties"] = False
    if args.config:
        config = config_from_file(args.config, overrides)
    else:
        config = config_from_dict({}, overrides)
    lexicon_path = args.lexicon if args.lexicon else starter_lexicon_path()
    summary = run_pipeline(config, args.out, lexicon_path=lexicon_path)
    render_report(args.out)
    print(
        f"pipeline done: hal rate {summary['hal_rate_reference']:.4f} -> "
        f"{summary['hal_rate_tuned']:.4f} "
        f"({summary['hal_rate_relative_reduction']:.1%} relative reduction) -> {args.out}"
    )
    return 0


def cmd_report(args) -> int:
    written = render_report(args.run, args.out)
    print(f"wrote {len(written)} report files -> {written[0].parent}")
    return 0


# ============================================================
# Parser
# ============================================================


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="halign", description=__doc__)
    parser.add_argument("--version", action="version", version=f"halign {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    p = sub.add_parser("extract", help="extract object mentions from text")
    _common_flags(p)
    p.add_argument("input", type=Path, help="text file (one line per sample) or .jsonl")
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("score", help="score responses against detections")
    _common_flags(p)
    p.add_argument("--responses", type=Path, required=True)
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--aggregation", choices=("micro", "macro"), default="micro")
    p.add_argument("--per-sample", action="store_true", help="include per-sample scores")
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("build-prefs", help="rank externally sampled completion pairs")
    _common_flags(p)
    p.add_argument("--completions", type=Path, required=True)
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--no-filter", action="store_true", help="keep exact ties (first wins)")
    p.set_defaults(fn=cmd_build_prefs)

    p = sub.add_parser("train", help="preference-tune a policy checkpoint")
    _common_flags(p)
    p.add_argument("--train-pairs", type=Path, required=True)
    p.add_argument("--val-pairs", type=Path, required=True)
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--beta", type=float, default=0.2, help="KL penalty scale; 0.2/0.3/0.5 grid")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--peak-lr", type=float, default=1e-2)
    p.add_argument("--warmup-steps", type=int, default=100)
    p.add_argument("--validation-every", type=int, default=100)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="decode and score a policy on scenes")
    _common_flags(p)
    p.add_argument("--policy", type=Path, required=True)
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--decoding", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--max-length", type=int, default=16)
    p.add_argument("--aggregation", choices=("micro", "macro"), default="micro")
    p.add_argument("--per-sample", action="store_true")
    p.add_argument("--completions-out", type=Path, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pipeline", help="end-to-end: pretrain, build pairs, tune, report")
    _common_flags(p)
    p.add_argument("--config", type=Path, default=None, help="pipeline config JSON")
    p.add_argument("--beta", type=float, default=None, help="default 0.2; grid 0.2/0.3/0.5")
    p.add_argument("--temperature", type=float, default=None, help="sampling temperature (default 0.7)")
    p.add_argument("--holdout", type=int, default=None, help="validation holdout (default 500, auto-scaled)")
    p.add_argument("--rounds", type=int, default=None, help="tuning rounds (default 1)")
    p.add_argument("--steps", type=int, default=None, help="optimizer steps per round (default 2000)")
    p.add_argument("--dialogues", type=int, default=None, help="source dialogues per round")
    p.add_argument("--pretrain-captions", type=int, default=None)
    p.add_argument("--p-h", type=float, default=None, help="pretraining hallucination-injection rate")
    p.add_argument("--no-filter", action="store_true", help="keep tie pairs in training")
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("report", help="render CSV tables and figures for a run")
    p.add_argument("--run", type=Path, required=True, help="pipeline output directory")
    p.add_argument("--out", type=Path, default=None, help="output directory (default <run>/report)")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
