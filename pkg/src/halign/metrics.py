"""Hallucination metrics for object mentions.

Per response: CHAIR_i is the fraction of mentioned object instances that are
not in the image's ground-truth set (mentions form a list, so repeats count).
Per corpus: CHAIR_s (hallucination rate) is the fraction of responses with at
least one hallucinated mention; coverage is recall of ground-truth classes;
cognition is the share of distinct hallucinated classes that fall in the
lexicon's predefined hallucinatory-target set.

Aggregation is either micro (pool counts across the corpus, then divide) or
macro (score each sample, then average the per-sample values).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .io_utils import DataError, read_jsonl
from .lexicon import Mention, SynonymLexicon

AGGREGATION_MODES = ("micro", "macro")


@dataclass(frozen=True)
class GroundTruth:
    """Objects actually present for one image."""

    image_id: str
    objects: frozenset[str]


@dataclass
class SampleScore:
    """Raw counts for one scored response; all ratios are derived from these."""

    sample_id: str
    mentioned_count: int  # object mention instances, repeats included
    hallucinated_count: int  # mention instances absent from ground truth
    hallucinated_classes: list[str]  # instance-level, in mention order
    covered_count: int  # distinct ground-truth classes that were mentioned
    truth_count: int  # size of the ground-truth set
    cognition_hits: int  # distinct hallucinated classes in the target set

    @property
    def chair_i(self) -> float:
        """Per-sample CHAIR_i; a response with no mentions scores 0.0."""
        if self.mentioned_count == 0:
            return 0.0
        return self.hallucinated_count / self.mentioned_count

    @property
    def distinct_hallucinated(self) -> int:
        return len(set(self.hallucinated_classes))

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "mentioned_count": self.mentioned_count,
            "hallucinated_count": self.hallucinated_count,
            "hallucinated_classes": list(self.hallucinated_classes),
            "covered_count": self.covered_count,
            "truth_count": self.truth_count,
            "cognition_hits": self.cognition_hits,
        }


@dataclass
class EvalReport:
    """Corpus-level metric report."""

    aggregation: str
    chair_i: float
    chair_s: float
    coverage: float
    cognition: float
    n_samples: int
    flags: list[str] = field(default_factory=list)
    per_sample: list[SampleScore] = field(default_factory=list)

    def to_dict(self, include_per_sample: bool = False) -> dict:
        doc = {
            "aggregation": self.aggregation,
            "chair_i": self.chair_i,
            "chair_s": self.chair_s,
            "coverage": self.coverage,
            "cognition": self.cognition,
            "n_samples": self.n_samples,
            "flags": list(self.flags),
        }
        if include_per_sample:
            doc["per_sample"] = [s.to_dict() for s in self.per_sample]
        return doc


def score_sample(
    sample_id: str,
    mentions: list[Mention],
    truth: GroundTruth,
    lexicon: SynonymLexicon,
) -> SampleScore:
    """Count hallucinated/covered mentions for one response.

    Raises DataError if a mention's class or a ground-truth object is not a
    canonical class of the lexicon (upstream extraction and detections must
    share the vocabulary).
    """
    known = lexicon.class_set
    bad_truth = truth.objects - known
    if bad_truth:
        raise DataError(
            f"{truth.image_id}: ground-truth objects not in lexicon: "
            + ", ".join(sorted(bad_truth))
        )
    hallucinated: list[str] = []
    seen: set[str] = set()
    for m in mentions:
        if m.canonical not in known:
            raise DataError(
                f"{sample_id}: mention class {m.canonical!r} not in lexicon"
            )
        seen.add(m.canonical)
        if m.canonical not in truth.objects:
            hallucinated.append(m.canonical)
    distinct_hall = set(hallucinated)
    return SampleScore(
        sample_id=sample_id,
        mentioned_count=len(mentions),
        hallucinated_count=len(hallucinated),
        hallucinated_classes=hallucinated,
        covered_count=len(truth.objects & seen),
        truth_count=len(truth.objects),
        cognition_hits=len(distinct_hall & lexicon.hallucinatory_targets),
    )


def chair_s(per_sample: list[SampleScore]) -> float:
    """Fraction of responses with at least one hallucinated mention."""
    if not per_sample:
        raise DataError("chair_s over an empty sample list is undefined")
    hits = sum(1 for s in per_sample if s.hallucinated_count >= 1)
    return hits / len(per_sample)


def _check_mode(mode: str) -> None:
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}")


def chair_i(per_sample: list[SampleScore], mode: str = "micro") -> float:
    """Corpus CHAIR_i under the given aggregation mode.

    Micro pools counts (sum hallucinated / sum mentioned) and is undefined
    when no sample mentions anything; macro averages per-sample CHAIR_i,
    counting zero-mention samples as 0.0.
    """
    _check_mode(mode)
    if not per_sample:
        raise DataError("chair_i over an empty sample list is undefined")
    if mode == "macro":
        return sum(s.chair_i for s in per_sample) / len(per_sample)
    mentioned = sum(s.mentioned_count for s in per_sample)
    if mentioned == 0:
        raise DataError("micro chair_i undefined: no sample mentions any object")
    return sum(s.hallucinated_count for s in per_sample) / mentioned


def coverage(per_sample: list[SampleScore], mode: str = "micro") -> float:
    """Recall of ground-truth classes among mentioned classes.

    Macro averages covered/truth over samples with a nonempty truth set;
    micro pools the counts. Undefined when every truth set is empty.
    """
    _check_mode(mode)
    if not per_sample:
        raise DataError("coverage over an empty sample list is undefined")
    with_truth = [s for s in per_sample if s.truth_count > 0]
    if not with_truth:
        raise DataError("coverage undefined: all samples have empty truth sets")
    if mode == "macro":
        return sum(s.covered_count / s.truth_count for s in with_truth) / len(with_truth)
    return sum(s.covered_count for s in with_truth) / sum(
        s.truth_count for s in with_truth
    )


def cognition(per_sample: list[SampleScore], mode: str = "micro") -> float:
    """Share of distinct hallucinated classes that are hallucinatory targets.

    Vacuous cases (no hallucinations anywhere, or an empty target set, which
    forces every cognition_hits to 0) return 0.0; aggregate() flags them.
    """
    _check_mode(mode)
    if not per_sample:
        raise DataError("cognition over an empty sample list is undefined")
    hallucinating = [s for s in per_sample if s.distinct_hallucinated > 0]
    if not hallucinating:
        return 0.0
    if mode == "macro":
        return sum(s.cognition_hits / s.distinct_hallucinated for s in hallucinating) / len(
            hallucinating
        )
    return sum(s.cognition_hits for s in hallucinating) / sum(
        s.distinct_hallucinated for s in hallucinating
    )


def aggregate(
    per_sample: list[SampleScore],
    mode: str = "micro",
    has_targets: bool = True,
) -> EvalReport:
    """Fold per-sample scores into an EvalReport.

    The fold is sequential over samples sorted by sample_id, so the result
    is bit-stable no matter how scoring was parallelized upstream.
    """
    _check_mode(mode)
    if not per_sample:
        raise DataError("cannot aggregate an empty sample list")
    ordered = sorted(per_sample, key=lambda s: s.sample_id)
    flags = []
    if not has_targets:
        flags.append("no_hallucinatory_targets")
    if all(s.distinct_hallucinated == 0 for s in ordered):
        flags.append("no_hallucinations")
    return EvalReport(
        aggregation=mode,
        chair_i=chair_i(ordered, mode),
        chair_s=chair_s(ordered),
        coverage=coverage(ordered, mode),
        cognition=cognition(ordered, mode),
        n_samples=len(ordered),
        flags=flags,
        per_sample=ordered,
    )


def load_detections(
    path: str | Path, lexicon: SynonymLexicon | None = None
) -> dict[str, GroundTruth]:
    """Load ground-truth object sets from a JSONL file.

    Each line is {"image_id": str, "objects": [canonical_name, ...]}.
    Object names are normalized on load; with a lexicon given, unknown
    classes raise DataError naming the line.
    """
    from .lexicon import normalize_term

    truths: dict[str, GroundTruth] = {}
    for lineno, rec in read_jsonl(path):
        if "image_id" not in rec or "objects" not in rec:
            raise DataError(f"{path}: line {lineno}: need 'image_id' and 'objects'")
        image_id = str(rec["image_id"])
        if image_id in truths:
            raise DataError(f"{path}: line {lineno}: duplicate image_id {image_id!r}")
        if not isinstance(rec["objects"], list):
            raise DataError(f"{path}: line {lineno}: 'objects' must be a list")
        objects = frozenset(normalize_term(str(o)) for o in rec["objects"])
        if lexicon is not None:
            unknown = objects - lexicon.class_set
            if unknown:
                raise DataError(
                    f"{path}: line {lineno}: objects not in lexicon: "
                    + ", ".join(sorted(unknown))
                )
        truths[image_id] = GroundTruth(image_id=image_id, objects=objects)
    if not truths:
        raise DataError(f"{path}: no detection records")
    return truths
