"""Preference-pair construction from sampled completion pairs.

For each source dialogue: truncate at a uniformly chosen human turn, sample
two completions from the captioner, score each completion's hallucination
fraction, and rank. The completion with the strictly lower score wins; exact
ties are filtered out by default (equality is decided on integer counts via
cross-multiplication, never on floats). The unfiltered variant keeps ties
and deterministically declares the first completion the winner.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .io_utils import DataError, read_jsonl, sub_rng, write_jsonl
from .lexicon import SynonymLexicon, extract_mentions
from .metrics import GroundTruth, score_sample
from .toy_world import SamplingConfig, Scene, ToyPolicy, sample

log = logging.getLogger(__name__)

HUMAN = "human"
ASSISTANT = "assistant"


@dataclass(frozen=True)
class Turn:
    role: str
    text: str


@dataclass
class Dialogue:
    """A multi-turn conversation about one image, alternating human/assistant."""

    sample_id: str
    image_id: str
    turns: list[Turn]

    def __post_init__(self):
        if not self.turns:
            raise DataError(f"dialogue {self.sample_id!r} has no turns")
        for i, turn in enumerate(self.turns):
            expected = HUMAN if i % 2 == 0 else ASSISTANT
            if turn.role != expected:
                raise DataError(
                    f"dialogue {self.sample_id!r}: turn {i} must be {expected!r}"
                )


@dataclass
class PromptContext:
    """A truncated dialogue: prior turns plus the human question to answer."""

    sample_id: str
    image_id: str
    prior_turns: list[Turn]
    question: str

    def __post_init__(self):
        if not self.question:
            raise DataError(f"context {self.sample_id!r} has an empty question")


@dataclass
class PreferencePair:
    """A ranked completion pair with its exact hallucination counts."""

    context: PromptContext
    winner: str
    loser: str
    winner_hallucinated: int
    winner_mentioned: int
    loser_hallucinated: int
    loser_mentioned: int

    @property
    def chair_winner(self) -> Fraction:
        return _chair_fraction(self.winner_hallucinated, self.winner_mentioned)

    @property
    def chair_loser(self) -> Fraction:
        return _chair_fraction(self.loser_hallucinated, self.loser_mentioned)

    @property
    def is_tie(self) -> bool:
        return self.chair_winner == self.chair_loser

    def to_record(self) -> dict:
        return {
            "sample_id": self.context.sample_id,
            "image_id": self.context.image_id,
            "context": [
                {"role": t.role, "text": t.text} for t in self.context.prior_turns
            ],
            "question": self.context.question,
            "winner": self.winner,
            "loser": self.loser,
            "chair_winner_num": self.winner_hallucinated,
            "chair_winner_den": self.winner_mentioned,
            "chair_loser_num": self.loser_hallucinated,
            "chair_loser_den": self.loser_mentioned,
        }


def _chair_fraction(hallucinated: int, mentioned: int) -> Fraction:
    # a completion that mentions nothing hallucinates nothing: 0, exactly
    return Fraction(hallucinated, mentioned) if mentioned else Fraction(0)


@dataclass
class Provenance:
    """Everything needed to regenerate a dataset bit for bit."""

    policy_id: str
    temperature: float
    seed: int
    round_index: int = 0

    def to_dict(self) -> dict:
        return {
            "policy_id": self.policy_id,
            "temperature": self.temperature,
            "seed": self.seed,
            "round_index": self.round_index,
        }


@dataclass
class PreferenceDataset:
    pairs: list[PreferencePair]
    provenance: Provenance
    n_source: int = 0
    n_filtered: int = 0

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def filter_rate(self) -> float:
        return self.n_filtered / self.n_source if self.n_source else 0.0


@dataclass
class BuildConfig:
    temperature: float = 0.7
    max_length: int = 16
    filter_ties: bool = True
    seed: int = 0
    round_index: int = 0


def truncate_dialogue(
    dialogue: Dialogue, rng: np.random.Generator
) -> PromptContext:
    """Cut a dialogue at a uniformly chosen human turn.

    The chosen turn becomes the question; everything before it is kept as
    prior context. Raises DataError when the dialogue has no human turns.
    """
    human_positions = [i for i, t in enumerate(dialogue.turns) if t.role == HUMAN]
    if not human_positions:
        raise DataError(f"dialogue {dialogue.sample_id!r} has no human turns")
    cut = human_positions[int(rng.integers(len(human_positions)))]
    return PromptContext(
        sample_id=dialogue.sample_id,
        image_id=dialogue.image_id,
        prior_turns=list(dialogue.turns[:cut]),
        question=dialogue.turns[cut].text,
    )


def sample_pair(
    policy: ToyPolicy,
    context: PromptContext,
    scene: Scene,
    temperature: float,
    rng: np.random.Generator,
    max_length: int = 16,
) -> tuple[str, str]:
    """Two completions drawn independently from the same policy and prompt."""
    cfg = SamplingConfig(temperature=temperature, max_length=max_length)
    y1 = " ".join(sample(policy, scene, cfg, rng))
    y2 = " ".join(sample(policy, scene, cfg, rng))
    return y1, y2


def rank_pair(
    y1: str,
    y2: str,
    context: PromptContext,
    truth: GroundTruth,
    lexicon: SynonymLexicon,
    filter_ties: bool = True,
) -> PreferencePair | None:
    """Rank two completions by per-response hallucination fraction.

    Strictly lower CHAIR_i wins. Equality is exact: cross-multiplied integer
    counts, with a mention-free completion counting as exactly zero. Ties
    return None when filtering; otherwise y1 wins by the documented rule.
    """
    s1 = score_sample(context.sample_id, extract_mentions(y1, lexicon), truth, lexicon)
    s2 = score_sample(context.sample_id, extract_mentions(y2, lexicon), truth, lexicon)
    c1 = _chair_fraction(s1.hallucinated_count, s1.mentioned_count)
    c2 = _chair_fraction(s2.hallucinated_count, s2.mentioned_count)
    if c1 == c2 and filter_ties:
        return None
    if c1 <= c2:
        first, second = (s1, y1), (s2, y2)
    else:
        first, second = (s2, y2), (s1, y1)
    (ws, wy), (ls, ly) = first, second
    return PreferencePair(
        context=context,
        winner=wy,
        loser=ly,
        winner_hallucinated=ws.hallucinated_count,
        winner_mentioned=ws.mentioned_count,
        loser_hallucinated=ls.hallucinated_count,
        loser_mentioned=ls.mentioned_count,
    )


def build_dataset(
    source: list[tuple[Dialogue, Scene]],
    policy: ToyPolicy,
    truths: dict[str, GroundTruth],
    lexicon: SynonymLexicon,
    config: BuildConfig,
    rng: np.random.Generator,
) -> PreferenceDataset:
    """Truncate, sample, rank, and (optionally) filter every source dialogue.

    Output pairs are ordered by sample_id. Identical source, policy, config,
    and generator state regenerate a byte-identical dataset file.
    """
    seen_ids: set[str] = set()
    pairs: list[PreferencePair] = []
    n_ties_kept = 0
    for dialogue, scene in source:
        if dialogue.sample_id in seen_ids:
            raise DataError(f"duplicate sample_id {dialogue.sample_id!r} in source")
        seen_ids.add(dialogue.sample_id)
        if dialogue.image_id not in truths:
            raise DataError(
                f"sample {dialogue.sample_id!r}: image_id {dialogue.image_id!r} "
                "has no ground-truth record"
            )
        context = truncate_dialogue(dialogue, rng)
        y1, y2 = sample_pair(
            policy, context, scene, config.temperature, rng, config.max_length
        )
        pair = rank_pair(
            y1, y2, context, truths[dialogue.image_id], lexicon,
            filter_ties=config.filter_ties,
        )
        if pair is not None:
            if pair.is_tie:
                n_ties_kept += 1
            pairs.append(pair)
    pairs.sort(key=lambda p: p.context.sample_id)
    if n_ties_kept:
        log.info(
            "kept %d tie pairs (tie rule: first completion wins)", n_ties_kept
        )
    return PreferenceDataset(
        pairs=pairs,
        provenance=Provenance(
            policy_id=policy.checkpoint_id,
            temperature=config.temperature,
            seed=config.seed,
            round_index=config.round_index,
        ),
        n_source=len(source),
        n_filtered=len(source) - len(pairs),
    )


def filter_tie_pairs(dataset: PreferenceDataset) -> PreferenceDataset:
    """Drop pairs whose two completions score exactly equal."""
    kept = [p for p in dataset.pairs if not p.is_tie]
    return PreferenceDataset(
        pairs=kept,
        provenance=dataset.provenance,
        n_source=dataset.n_source,
        n_filtered=dataset.n_source - len(kept),
    )


def split_validation(
    dataset: PreferenceDataset, holdout: int, seed: int
) -> tuple[PreferenceDataset, PreferenceDataset]:
    """Seeded split into (train, validation); both keep sample_id order.

    Raises DataError when holdout is not in (0, len(dataset)).
    """
    n = len(dataset.pairs)
    if holdout <= 0 or holdout >= n:
        raise DataError(
            f"holdout {holdout} must be strictly between 0 and dataset size {n}"
        )
    rng = sub_rng(seed, "split")
    order = rng.permutation(n)
    val_idx = sorted(int(i) for i in order[:holdout])
    val_set = set(val_idx)
    train_pairs = [p for i, p in enumerate(dataset.pairs) if i not in val_set]
    val_pairs = [dataset.pairs[i] for i in val_idx]

    def _subset(pairs: list[PreferencePair]) -> PreferenceDataset:
        return PreferenceDataset(
            pairs=pairs,
            provenance=dataset.provenance,
            n_source=dataset.n_source,
            n_filtered=dataset.n_filtered,
        )

    return _subset(train_pairs), _subset(val_pairs)


def scale_holdout(requested: int, dataset_size: int) -> int:
    """Shrink an infeasible holdout to a fifth of the dataset (at least 1)."""
    if 0 < requested < dataset_size:
        return requested
    return max(1, dataset_size // 5)


# ============================================================
# Persistence
# ============================================================


def save_dataset(dataset: PreferenceDataset, path: str | Path) -> None:
    write_jsonl(path, (p.to_record() for p in dataset.pairs))


def provenance_record(dataset: PreferenceDataset) -> dict:
    doc = dataset.provenance.to_dict()
    doc.update(
        {
            "n_source": dataset.n_source,
            "n_kept": len(dataset.pairs),
            "n_filtered": dataset.n_filtered,
            "filter_rate": dataset.filter_rate,
        }
    )
    return doc


_PAIR_KEYS = (
    "sample_id", "image_id", "context", "question", "winner", "loser",
    "chair_winner_num", "chair_winner_den", "chair_loser_num", "chair_loser_den",
)


def load_dataset(path: str | Path) -> PreferenceDataset:
    """Load a preference-pair JSONL file (provenance is not stored inline)."""
    pairs: list[PreferencePair] = []
    for lineno, rec in read_jsonl(path):
        missing = [k for k in _PAIR_KEYS if k not in rec]
        if missing:
            raise DataError(
                f"{path}: line {lineno}: missing keys: {', '.join(missing)}"
            )
        context = PromptContext(
            sample_id=str(rec["sample_id"]),
            image_id=str(rec["image_id"]),
            prior_turns=[
                Turn(role=t["role"], text=t["text"]) for t in rec["context"]
            ],
            question=str(rec["question"]),
        )
        pairs.append(
            PreferencePair(
                context=context,
                winner=str(rec["winner"]),
                loser=str(rec["loser"]),
                winner_hallucinated=int(rec["chair_winner_num"]),
                winner_mentioned=int(rec["chair_winner_den"]),
                loser_hallucinated=int(rec["chair_loser_num"]),
                loser_mentioned=int(rec["chair_loser_den"]),
            )
        )
    return PreferenceDataset(
        pairs=pairs,
        provenance=Provenance(policy_id="unknown", temperature=0.0, seed=0),
        n_source=len(pairs),
    )


def load_completions(path: str | Path) -> list[tuple[PromptContext, tuple[str, str]]]:
    """Load externally sampled completion pairs.

    Each line: {"sample_id", "image_id", "context": [{"role","text"}, ...],
    "question", "completions": [str, str]}.
    """
    out = []
    seen: set[str] = set()
    for lineno, rec in read_jsonl(path):
        for key in ("sample_id", "image_id", "question", "completions"):
            if key not in rec:
                raise DataError(f"{path}: line {lineno}: missing {key!r}")
        comps = rec["completions"]
        if not isinstance(comps, list) or len(comps) != 2:
            raise DataError(
                f"{path}: line {lineno}: 'completions' must be a pair of strings"
            )
        sample_id = str(rec["sample_id"])
        if sample_id in seen:
            raise DataError(f"{path}: line {lineno}: duplicate sample_id {sample_id!r}")
        seen.add(sample_id)
        context = PromptContext(
            sample_id=sample_id,
            image_id=str(rec["image_id"]),
            prior_turns=[
                Turn(role=t["role"], text=t["text"]) for t in rec.get("context", [])
            ],
            question=str(rec["question"]),
        )
        out.append((context, (str(comps[0]), str(comps[1]))))
    return out
