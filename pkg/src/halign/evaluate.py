"""Decode-and-score evaluation shared by training validation and the CLI."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .io_utils import DataError
from .lexicon import SynonymLexicon, extract_mentions
from .metrics import GroundTruth, SampleScore, aggregate, score_sample
from .toy_world import SamplingConfig, Scene, ToyPolicy, greedy_decode, sample


@dataclass
class DecodingConfig:
    mode: str = "greedy"  # "greedy" or "sample"
    temperature: float = 0.7
    max_length: int = 16

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise DataError(f"unknown decoding mode {self.mode!r}")
        if self.mode == "sample" and self.temperature <= 0:
            raise DataError("sampling temperature must be positive")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "temperature": self.temperature,
            "max_length": self.max_length,
        }


def generate_completion(
    policy: ToyPolicy,
    scene: Scene,
    decoding: DecodingConfig,
    rng: np.random.Generator | None = None,
) -> str:
    if decoding.mode == "greedy":
        return " ".join(greedy_decode(policy, scene, decoding.max_length))
    if rng is None:
        raise DataError("sampled decoding needs a random generator")
    cfg = SamplingConfig(temperature=decoding.temperature, max_length=decoding.max_length)
    return " ".join(sample(policy, scene, cfg, rng))


def score_completions(
    items: list[tuple[str, Scene, str]],
    lexicon: SynonymLexicon,
) -> list[SampleScore]:
    """Score (sample_id, scene, completion) triples against scene objects."""
    scores = []
    for sample_id, scene, text in items:
        truth = GroundTruth(image_id=scene.image_id, objects=scene.objects)
        mentions = extract_mentions(text, lexicon)
        scores.append(score_sample(sample_id, mentions, truth, lexicon))
    return scores


def evaluate_policy(
    policy: ToyPolicy,
    items: list[tuple[str, Scene]],
    lexicon: SynonymLexicon,
    decoding: DecodingConfig,
    rng: np.random.Generator | None = None,
) -> tuple[list[SampleScore], list[str]]:
    """Generate one completion per item and score it. Items are processed in
    the given order; with greedy decoding the result is a pure function of
    the policy."""
    if not items:
        raise DataError("nothing to evaluate")
    completions = [
        generate_completion(policy, scene, decoding, rng) for _, scene in items
    ]
    triples = [
        (sample_id, scene, text)
        for (sample_id, scene), text in zip(items, completions)
    ]
    return score_completions(triples, lexicon), completions


def validation_chair_i(
    policy: ToyPolicy,
    items: list[tuple[str, Scene]],
    lexicon: SynonymLexicon,
    max_length: int = 16,
) -> float:
    """Micro CHAIR_i of greedy completions; the checkpoint-selection score."""
    scores, _ = evaluate_policy(
        policy, items, lexicon, DecodingConfig(mode="greedy", max_length=max_length)
    )
    mentioned = sum(s.mentioned_count for s in scores)
    if mentioned == 0:
        # a silent policy hallucinates nothing
        return 0.0
    return sum(s.hallucinated_count for s in scores) / mentioned


def report_both_modes(
    scores: list[SampleScore], has_targets: bool = True
) -> dict:
    """Micro and macro EvalReports of the same per-sample scores, as a dict."""
    return {
        mode: aggregate(scores, mode, has_targets=has_targets).to_dict()
        for mode in ("micro", "macro")
    }
