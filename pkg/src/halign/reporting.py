"""Report rendering: delimited tables plus matplotlib figures for a run.

Reads the artifacts a pipeline (or train) run wrote and emits training-log
and metric-summary CSVs next to PNG figures of the training curves and the
reference-vs-tuned comparison.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .io_utils import DataError, load_json, read_jsonl

LOG_FIELDS = ("step", "loss", "margin_acc", "val_chair_i_micro", "kl_estimate", "lr")
METRIC_FIELDS = (
    "round", "arm", "decoding", "aggregation",
    "chair_i", "chair_s", "coverage", "cognition", "n_samples",
)

# keep figure output byte-stable across reruns
_PNG_METADATA = {"Software": "halign"}


def _round_dirs(run_dir: Path) -> list[Path]:
    rounds = sorted(p for p in run_dir.glob("round_*") if p.is_dir())
    if not rounds:
        raise DataError(f"{run_dir}: no round_* directories to report on")
    return rounds


def load_training_logs(run_dir: Path) -> dict[int, list[dict]]:
    logs = {}
    for rdir in _round_dirs(run_dir):
        path = rdir / "train_log.jsonl"
        if not path.exists():
            raise DataError(f"{path}: missing training log")
        logs[int(rdir.name.split("_")[1])] = [rec for _, rec in read_jsonl(path)]
    return logs


def load_round_summaries(run_dir: Path) -> dict[int, dict]:
    return {
        int(rdir.name.split("_")[1]): load_json(rdir / "summary.json")
        for rdir in _round_dirs(run_dir)
    }


def write_training_log_csv(logs: dict[int, list[dict]], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("round",) + LOG_FIELDS)
        for rnd in sorted(logs):
            for entry in logs[rnd]:
                writer.writerow([rnd] + [entry[k] for k in LOG_FIELDS])


def write_metrics_csv(summaries: dict[int, dict], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for rnd in sorted(summaries):
            reports = summaries[rnd]["reports"]
            for arm in ("reference", "tuned"):
                for decoding in ("sampled", "greedy"):
                    for mode in ("micro", "macro"):
                        rep = reports[arm][decoding][mode]
                        writer.writerow(
                            [
                                rnd, arm, decoding, mode,
                                rep["chair_i"], rep["chair_s"],
                                rep["coverage"], rep["cognition"],
                                rep["n_samples"],
                            ]
                        )


def render_training_figure(logs: dict[int, list[dict]], path: Path) -> None:
    fig, axes = plt.subplots(2, 2, figsize=(9, 6.5))
    panels = (
        ("loss", "training loss", axes[0][0]),
        ("val_chair_i_micro", "validation CHAIR_i (micro)", axes[0][1]),
        ("kl_estimate", "KL vs reference", axes[1][0]),
        ("lr", "learning rate", axes[1][1]),
    )
    for key, title, ax in panels:
        for rnd in sorted(logs):
            steps = [e["step"] for e in logs[rnd]]
            ax.plot(steps, [e[key] for e in logs[rnd]], label=f"round {rnd}")
        ax.set_title(title, fontsize=10)
        ax.set_xlabel("step", fontsize=9)
        ax.tick_params(labelsize=8)
        if len(logs) > 1:
            ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_METADATA)
    plt.close(fig)


def render_halrate_figure(summaries: dict[int, dict], path: Path) -> None:
    rounds = sorted(summaries)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.8))
    width = 0.35
    xs = range(len(rounds))
    ref = [summaries[r]["hal_rate_reference"] for r in rounds]
    tuned = [summaries[r]["hal_rate_tuned"] for r in rounds]
    ax1.bar([x - width / 2 for x in xs], ref, width, label="reference")
    ax1.bar([x + width / 2 for x in xs], tuned, width, label="tuned")
    ax1.set_xticks(list(xs), [f"round {r}" for r in rounds])
    ax1.set_ylabel("hallucination rate (CHAIR_s)")
    ax1.set_title("sampled eval on validation prompts", fontsize=10)
    ax1.legend(fontsize=8)

    chair_ref = [
        summaries[r]["reports"]["reference"]["sampled"]["micro"]["chair_i"]
        for r in rounds
    ]
    chair_tuned = [
        summaries[r]["reports"]["tuned"]["sampled"]["micro"]["chair_i"]
        for r in rounds
    ]
    ax2.bar([x - width / 2 for x in xs], chair_ref, width, label="reference")
    ax2.bar([x + width / 2 for x in xs], chair_tuned, width, label="tuned")
    ax2.set_xticks(list(xs), [f"round {r}" for r in rounds])
    ax2.set_ylabel("CHAIR_i (micro)")
    ax2.set_title("instance-level hallucination", fontsize=10)
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_METADATA)
    plt.close(fig)


def render_report(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Render CSVs and figures for a finished run; returns written paths."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    logs = load_training_logs(run_dir)
    summaries = load_round_summaries(run_dir)
    written = []
    for name, fn in (
        ("training_log.csv", lambda p: write_training_log_csv(logs, p)),
        ("metrics_summary.csv", lambda p: write_metrics_csv(summaries, p)),
        ("fig_training.png", lambda p: render_training_figure(logs, p)),
        ("fig_halrate.png", lambda p: render_halrate_figure(summaries, p)),
    ):
        path = out / name
        fn(path)
        written.append(path)
    return written
