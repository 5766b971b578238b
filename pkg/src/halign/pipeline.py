"""End-to-end run: generate world, pretrain, build pairs, tune, report.

Everything derives from one seed through named sub-streams, and every run
directory gets a resolved-config snapshot with input checksums, so reruns
with the same inputs are byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .dpo import DpoConfig, RoundsConfig, iterate_rounds
from .io_utils import ConfigError, DataError, dump_json, load_json, sha256_file, sub_rng
from .lexicon import SynonymLexicon, load_lexicon, starter_lexicon_path
from .preference import ASSISTANT, HUMAN, BuildConfig, Dialogue, Turn
from .toy_world import (
    CorpusConfig,
    Scene,
    ToyPolicy,
    WorldConfig,
    make_scenes,
    pretrain_reference,
    sample,
    SamplingConfig,
    save_policy,
)

QUESTION_TEMPLATES = (
    "Describe the image.",
    "What objects are in the picture?",
    "Tell me what you can see.",
)

DEFAULT_WORLD = {
    "classes": [
        "dog", "cat", "horse", "sheep", "bird",
        "car", "bus", "bicycle", "truck", "motorcycle",
        "cup", "bowl", "spoon", "fork", "bottle",
    ],
    "groups": [
        ["dog", "cat", "horse", "sheep", "bird"],
        ["car", "bus", "bicycle", "truck", "motorcycle"],
        ["cup", "bowl", "spoon", "fork", "bottle"],
    ],
    "size_min": 2,
    "size_max": 5,
    "correlation": 0.85,
}


@dataclass
class PipelineConfig:
    """Resolved settings for one pipeline run."""

    world: WorldConfig
    n_pretrain_captions: int = 4000
    p_h: float = 0.3
    # sized so >= 2000 train pairs survive holdout + tie filtering
    n_dialogues: int = 8000
    temperature: float = 0.7
    holdout: int = 500
    beta: float = 0.2
    total_steps: int = 2000
    warmup_steps: int = 100
    peak_lr: float = 1e-2
    batch_size: int = 32
    validation_every: int = 100
    rounds: int = 1
    filter_ties: bool = True
    seed: int = 0
    max_length: int = 16

    def to_dict(self) -> dict:
        doc = {
            k: v for k, v in self.__dict__.items() if k != "world"
        }
        doc["world"] = self.world.to_dict()
        return doc


def config_from_file(path: str | Path, overrides: dict | None = None) -> PipelineConfig:
    """Read a pipeline config JSON file and apply CLI overrides."""
    doc = load_json(path)
    if not isinstance(doc, dict):
        raise DataError(f"{path}: pipeline config must be a JSON object")
    return config_from_dict(doc, overrides)


def config_from_dict(doc: dict, overrides: dict | None = None) -> PipelineConfig:
    merged = dict(doc)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    world = WorldConfig.from_dict(merged.get("world", DEFAULT_WORLD))
    known = {
        "n_pretrain_captions", "p_h", "n_dialogues", "temperature", "holdout",
        "beta", "total_steps", "warmup_steps", "peak_lr", "batch_size",
        "validation_every", "rounds", "filter_ties", "seed", "max_length",
    }
    unknown = set(merged) - known - {"world"}
    if unknown:
        raise ConfigError(
            "unknown pipeline config keys: " + ", ".join(sorted(unknown))
        )
    kwargs = {k: merged[k] for k in known if k in merged}
    return PipelineConfig(world=world, **kwargs)


def synth_dialogue(
    sample_id: str,
    scene: Scene,
    policy: ToyPolicy,
    temperature: float,
    max_length: int,
    rng: np.random.Generator,
) -> Dialogue:
    """A 1-3 question dialogue; assistant turns are sampled captions."""
    n_questions = int(rng.integers(1, 4))
    turns: list[Turn] = []
    cfg = SamplingConfig(temperature=temperature, max_length=max_length)
    for q in range(n_questions):
        question = QUESTION_TEMPLATES[int(rng.integers(len(QUESTION_TEMPLATES)))]
        turns.append(Turn(role=HUMAN, text=question))
        if q < n_questions - 1:
            reply = " ".join(sample(policy, scene, cfg, rng))
            turns.append(Turn(role=ASSISTANT, text=reply))
    return Dialogue(sample_id=sample_id, image_id=scene.image_id, turns=turns)


def make_round_source(
    config: PipelineConfig,
) -> "callable":
    """Source builder handed to iterate_rounds: fresh scenes + dialogues."""

    def _make(round_index: int, sampler: ToyPolicy) -> list[tuple[Dialogue, Scene]]:
        scene_rng = sub_rng(config.seed, "scenes", round_index)
        dlg_rng = sub_rng(config.seed, "dialogues", round_index)
        scenes = make_scenes(
            config.n_dialogues, config.world, scene_rng, prefix=f"r{round_index}-img"
        )
        source = []
        for i, scene in enumerate(scenes):
            dialogue = synth_dialogue(
                f"r{round_index}-s{i:06d}",
                scene,
                sampler,
                config.temperature,
                config.max_length,
                dlg_rng,
            )
            source.append((dialogue, scene))
        return source

    return _make


def check_world_in_lexicon(world: WorldConfig, lexicon: SynonymLexicon) -> None:
    missing = set(world.classes) - lexicon.class_set
    if missing:
        raise ConfigError(
            "world classes missing from the lexicon: " + ", ".join(sorted(missing))
        )


def run_pipeline(
    config: PipelineConfig,
    out_dir: str | Path,
    lexicon: SynonymLexicon | None = None,
    lexicon_path: str | Path | None = None,
) -> dict:
    """Pretrain a reference, run preference-tuning rounds, write a summary.

    Returns the cross-round summary dict (also written to out/summary.json).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if lexicon is None:
        lexicon_path = Path(lexicon_path) if lexicon_path else starter_lexicon_path()
        lexicon = load_lexicon(lexicon_path)
    check_world_in_lexicon(config.world, lexicon)

    inputs = {}
    if lexicon_path is not None:
        inputs[str(lexicon_path)] = sha256_file(lexicon_path)
    dump_json(
        out / "run_config.json",
        {"tool_version": __version__, "config": config.to_dict(), "inputs": inputs},
    )

    corpus = CorpusConfig(
        world=config.world,
        n_captions=config.n_pretrain_captions,
        p_h=config.p_h,
    )
    reference, _ = pretrain_reference(corpus, sub_rng(config.seed, "corpus"))
    save_policy(reference, out / "policy_pretrained.json", meta={"role": "pretrained"})

    rounds_cfg = RoundsConfig(
        dpo=DpoConfig(
            beta=config.beta,
            peak_lr=config.peak_lr,
            warmup_steps=config.warmup_steps,
            total_steps=config.total_steps,
            batch_size=config.batch_size,
            validation_every=config.validation_every,
            seed=config.seed,
            max_length=config.max_length,
        ),
        build=BuildConfig(
            temperature=config.temperature,
            max_length=config.max_length,
            seed=config.seed,
        ),
        holdout=config.holdout,
        filter_ties=config.filter_ties,
        eval_temperature=config.temperature,
    )
    artifacts = iterate_rounds(
        config.rounds,
        rounds_cfg,
        reference,
        lexicon,
        make_round_source(config),
        out,
    )

    summary = {
        "tool_version": __version__,
        "config": config.to_dict(),
        "inputs": inputs,
        "rounds": [a.summary for a in artifacts],
        "hal_rate_reference": artifacts[0].summary["hal_rate_reference"],
        "hal_rate_tuned": artifacts[-1].summary["hal_rate_tuned"],
        "hal_rate_relative_reduction": (
            (
                artifacts[0].summary["hal_rate_reference"]
                - artifacts[-1].summary["hal_rate_tuned"]
            )
            / artifacts[0].summary["hal_rate_reference"]
            if artifacts[0].summary["hal_rate_reference"] > 0
            else 0.0
        ),
        "best_validation_chair_i": artifacts[-1].summary["best_validation_chair_i"],
        "final_kl_estimate": artifacts[-1].summary["final_kl_estimate"],
    }
    dump_json(out / "summary.json", summary)
    return summary
