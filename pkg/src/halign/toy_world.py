"""Synthetic caption world: scenes, a log-linear captioner, and pretraining.

Scenes are small sets of object classes drawn with within-group co-occurrence
correlation. The captioner is a log-linear next-token model whose context
features are scene-presence indicators, already-said indicators, and the
previous token. Pretraining fits it by maximum likelihood on templated
captions where, with probability p_h, the most strongly implied absent
object is mentioned anyway; that bakes a hallucination prior into the
reference policy on purpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .io_utils import DataError, canonical_json, dump_json, load_json, sha256_text

EOS = "</s>"
START_WORDS = ("a", "the")
SEPARATORS = ("and", "with", "near")
CONNECTIVES = START_WORDS + SEPARATORS

CHECKPOINT_FORMAT_VERSION = 1


# ============================================================
# Scenes
# ============================================================


@dataclass
class WorldConfig:
    """Object inventory and scene-generation knobs.

    groups must partition classes; correlation in [0, 1] controls how
    strongly scenes stay within the first-drawn object's group.
    """

    classes: list[str]
    groups: list[list[str]]
    size_min: int = 2
    size_max: int = 6
    correlation: float = 0.85

    def __post_init__(self):
        if not self.classes:
            raise DataError("world has no object classes")
        if len(set(self.classes)) != len(self.classes):
            raise DataError("world classes must be unique")
        flat = [c for g in self.groups for c in g]
        if sorted(flat) != sorted(self.classes):
            raise DataError("groups must partition the class list exactly")
        if not (1 <= self.size_min <= self.size_max <= len(self.classes)):
            raise DataError(
                f"scene size range [{self.size_min}, {self.size_max}] invalid for "
                f"{len(self.classes)} classes"
            )
        if not 0.0 <= self.correlation <= 1.0:
            raise DataError("correlation must lie in [0, 1]")

    def group_of(self, cls: str) -> int:
        for gi, members in enumerate(self.groups):
            if cls in members:
                return gi
        raise KeyError(cls)

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "groups": [list(g) for g in self.groups],
            "size_min": self.size_min,
            "size_max": self.size_max,
            "correlation": self.correlation,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "WorldConfig":
        return cls(
            classes=list(doc["classes"]),
            groups=[list(g) for g in doc["groups"]],
            size_min=int(doc.get("size_min", 2)),
            size_max=int(doc.get("size_max", 6)),
            correlation=float(doc.get("correlation", 0.85)),
        )


@dataclass(frozen=True)
class Scene:
    """One synthetic image: the objects present plus the seed group label."""

    image_id: str
    objects: frozenset[str]
    co_occurrence_group: int

    def __post_init__(self):
        if not self.objects:
            raise DataError(f"scene {self.image_id!r} has an empty object set")


def gen_scene(rng: np.random.Generator, config: WorldConfig, image_id: str) -> Scene:
    """Draw one scene: first object uniform, later objects biased to its group."""
    size = int(rng.integers(config.size_min, config.size_max + 1))
    pool = list(config.classes)  # config order; all set iteration stays sorted
    first = pool[int(rng.integers(len(pool)))]
    group_idx = config.group_of(first)
    group = config.groups[group_idx]
    chosen = [first]
    while len(chosen) < size:
        in_group = [c for c in group if c not in chosen]
        if in_group and rng.random() < config.correlation:
            chosen.append(in_group[int(rng.integers(len(in_group)))])
        else:
            rest = [c for c in pool if c not in chosen]
            chosen.append(rest[int(rng.integers(len(rest)))])
    return Scene(
        image_id=image_id,
        objects=frozenset(chosen),
        co_occurrence_group=group_idx,
    )


def make_scenes(
    n: int, config: WorldConfig, rng: np.random.Generator, prefix: str = "scene"
) -> list[Scene]:
    return [gen_scene(rng, config, f"{prefix}-{i:06d}") for i in range(n)]


# ============================================================
# Caption corpus
# ============================================================


@dataclass
class CorpusConfig:
    """Synthetic pretraining corpus settings."""

    world: WorldConfig
    n_captions: int
    p_h: float = 0.3  # per-caption probability of mentioning an absent object
    fit_iters: int = 1500
    fit_lr: float = 0.05

    def __post_init__(self):
        if self.n_captions <= 0:
            raise DataError("corpus has no captions")
        if not 0.0 <= self.p_h <= 1.0:
            raise DataError("p_h must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "world": self.world.to_dict(),
            "n_captions": self.n_captions,
            "p_h": self.p_h,
            "fit_iters": self.fit_iters,
            "fit_lr": self.fit_lr,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CorpusConfig":
        return cls(
            world=WorldConfig.from_dict(doc["world"]),
            n_captions=int(doc["n_captions"]),
            p_h=float(doc.get("p_h", 0.3)),
            fit_iters=int(doc.get("fit_iters", 1500)),
            fit_lr=float(doc.get("fit_lr", 0.05)),
        )


def implied_absent_object(scene: Scene, config: WorldConfig) -> str | None:
    """The absent class most implied by the scene's co-occurrence structure.

    Groups are ranked by how many members are present (ties to the earlier
    group); the first absent member in class order of the best group wins.
    Returns None when every class is present. Deterministic so the prior the
    corpus teaches is sharp enough to survive greedy decoding.
    """
    ranked = sorted(
        range(len(config.groups)),
        key=lambda gi: (-sum(1 for c in config.groups[gi] if c in scene.objects), gi),
    )
    for gi in ranked:
        present = sum(1 for c in config.groups[gi] if c in scene.objects)
        if present == 0:
            break
        absent = [c for c in config.groups[gi] if c not in scene.objects]
        if absent:
            return absent[0]
    return None


def synth_caption(
    scene: Scene, config: CorpusConfig, rng: np.random.Generator
) -> list[str]:
    """Template caption for a scene, without the EOS token.

    Lists the scene's objects in random order, joined by connectives. With
    probability p_h the implied absent object leads the caption.
    """
    objects = sorted(scene.objects)
    order = [objects[i] for i in rng.permutation(len(objects))]
    if rng.random() < config.p_h:
        ghost = implied_absent_object(scene, config.world)
        if ghost is not None:
            order.insert(0, ghost)
    tokens = [START_WORDS[int(rng.integers(len(START_WORDS)))]]
    for i, obj in enumerate(order):
        if i > 0:
            tokens.append(SEPARATORS[int(rng.integers(len(SEPARATORS)))])
        tokens.append(obj)
    return tokens


# ============================================================
# Log-linear policy
# ============================================================


@dataclass
class SamplingConfig:
    temperature: float = 0.7
    max_length: int = 16

    def __post_init__(self):
        if self.temperature <= 0:
            raise DataError("temperature must be positive")
        if self.max_length < 1:
            raise DataError("max_length must be at least 1")


@dataclass
class ToyPolicy:
    """Log-linear next-token captioner.

    Vocabulary = object classes + connectives + EOS. params has one row per
    context feature and one column per vocabulary token; the logit of a
    token is the sum of the rows of the active features (bias, one per
    present scene object, one per already-said class, one for the previous
    token or BOS).
    """

    classes: tuple[str, ...]
    connectives: tuple[str, ...]
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.vocab: tuple[str, ...] = self.classes + self.connectives + (EOS,)
        self.token_index = {tok: i for i, tok in enumerate(self.vocab)}
        self.class_index = {c: i for i, c in enumerate(self.classes)}
        if len(self.token_index) != len(self.vocab):
            raise DataError("vocabulary tokens must be unique")
        expect = (self.n_features, len(self.vocab))
        if self.params.shape != expect:
            raise DataError(f"params shape {self.params.shape} != {expect}")
        self._max_token_words = max(len(t.split()) for t in self.vocab)

    # --- feature layout -------------------------------------------------
    # [0]                       bias
    # [1 .. K]                  scene presence per class
    # [K+1 .. 2K]               class already said
    # [2K+1 .. 2K+V]            previous token
    # [2K+V+1]                  BOS (no previous token)

    @property
    def n_features(self) -> int:
        k, v = len(self.classes), len(self.classes) + len(self.connectives) + 1
        return 2 * k + v + 2

    @property
    def eos_index(self) -> int:
        return len(self.vocab) - 1

    def feature_names(self) -> list[str]:
        names = ["bias"]
        names += [f"scene:{c}" for c in self.classes]
        names += [f"said:{c}" for c in self.classes]
        names += [f"prev:{t}" for t in self.vocab]
        names.append("prev:<bos>")
        return names

    def feature_indices(
        self, scene_objects: frozenset[str], said: set[str], prev: int | None
    ) -> list[int]:
        k = len(self.classes)
        idxs = [0]
        for c in sorted(scene_objects):
            idxs.append(1 + self.class_index[c])
        for c in sorted(said):
            idxs.append(1 + k + self.class_index[c])
        idxs.append(2 * k + 1 + (prev if prev is not None else len(self.vocab)))
        return idxs

    def step_logits(
        self, scene_objects: frozenset[str], said: set[str], prev: int | None
    ) -> np.ndarray:
        return self.params[self.feature_indices(scene_objects, said, prev)].sum(axis=0)

    def check_scene(self, scene: Scene) -> None:
        unknown = scene.objects - set(self.classes)
        if unknown:
            raise DataError(
                f"scene {scene.image_id!r} has objects outside the policy's "
                "class inventory: " + ", ".join(sorted(unknown))
            )

    # --- text round trip --------------------------------------------------

    def encode(self, text: str) -> list[int]:
        """Tokenize a completion back to vocabulary indices.

        Multi-word vocabulary items (compound class names) are matched
        longest first. Raises DataError on out-of-vocabulary words.
        """
        words = text.split()
        out: list[int] = []
        i = 0
        while i < len(words):
            for width in range(min(self._max_token_words, len(words) - i), 0, -1):
                cand = " ".join(words[i : i + width])
                if cand in self.token_index:
                    out.append(self.token_index[cand])
                    i += width
                    break
            else:
                raise DataError(f"token {words[i]!r} is not in the policy vocabulary")
        return out

    def decode(self, token_ids: list[int]) -> str:
        return " ".join(self.vocab[t] for t in token_ids)

    # --- persistence -------------------------------------------------------

    def copy(self) -> "ToyPolicy":
        return ToyPolicy(
            classes=self.classes,
            connectives=self.connectives,
            params=self.params.copy(),
        )

    def to_dict(self, meta: dict | None = None) -> dict:
        names = self.feature_names()
        triples = [
            [names[f], self.vocab[t], float(self.params[f, t])]
            for f in range(self.params.shape[0])
            for t in range(self.params.shape[1])
        ]
        doc = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "loglinear-captioner",
            "vocabulary": {
                "classes": list(self.classes),
                "connectives": list(self.connectives),
                "eos": EOS,
            },
            "logits": triples,
        }
        if meta:
            doc["meta"] = meta
        return doc

    @property
    def checkpoint_id(self) -> str:
        doc = self.to_dict()
        return sha256_text(canonical_json(doc))[:12]


def new_policy(classes: list[str]) -> ToyPolicy:
    """Zero-initialized policy (uniform next-token distribution)."""
    k = len(classes)
    v = k + len(CONNECTIVES) + 1
    params = np.zeros((2 * k + v + 2, v), dtype=np.float64)
    return ToyPolicy(classes=tuple(classes), connectives=CONNECTIVES, params=params)


def save_policy(policy: ToyPolicy, path: str | Path, meta: dict | None = None) -> None:
    dump_json(path, policy.to_dict(meta))


def load_policy(path: str | Path) -> ToyPolicy:
    doc = load_json(path)
    if not isinstance(doc, dict) or doc.get("kind") != "loglinear-captioner":
        raise DataError(f"{path}: not a policy checkpoint")
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise DataError(
            f"{path}: unsupported checkpoint format_version {doc.get('format_version')!r}"
        )
    vocab_doc = doc["vocabulary"]
    policy = ToyPolicy(
        classes=tuple(vocab_doc["classes"]),
        connectives=tuple(vocab_doc["connectives"]),
        params=np.zeros(
            (
                2 * len(vocab_doc["classes"])
                + len(vocab_doc["classes"])
                + len(vocab_doc["connectives"])
                + 3,
                len(vocab_doc["classes"]) + len(vocab_doc["connectives"]) + 1,
            )
        ),
    )
    names = {n: i for i, n in enumerate(policy.feature_names())}
    for entry in doc["logits"]:
        fname, token, value = entry
        if fname not in names or token not in policy.token_index:
            raise DataError(f"{path}: unknown logit entry {entry!r}")
        policy.params[names[fname], policy.token_index[token]] = float(value)
    return policy


# ============================================================
# Sampling and scoring a completion's probability
# ============================================================


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    ex = np.exp(shifted)
    return ex / ex.sum()


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - math.log(np.exp(shifted).sum())


def sample(
    policy: ToyPolicy,
    scene: Scene,
    config: SamplingConfig,
    rng: np.random.Generator,
) -> list[str]:
    """Ancestral sampling with temperature; returns tokens without EOS.

    Stops at EOS or after max_length tokens, whichever comes first.
    """
    policy.check_scene(scene)
    said: set[str] = set()
    prev: int | None = None
    out: list[str] = []
    for _ in range(config.max_length):
        logits = policy.step_logits(scene.objects, said, prev)
        probs = _softmax(logits / config.temperature)
        draw = int(np.searchsorted(np.cumsum(probs), rng.random()))
        draw = min(draw, len(probs) - 1)  # guard the cumsum-rounding edge
        if draw == policy.eos_index:
            break
        token = policy.vocab[draw]
        out.append(token)
        if token in policy.class_index:
            said.add(token)
        prev = draw
    return out


def greedy_decode(policy: ToyPolicy, scene: Scene, max_length: int = 16) -> list[str]:
    """Argmax decoding; ties resolve to the lowest token index."""
    policy.check_scene(scene)
    said: set[str] = set()
    prev: int | None = None
    out: list[str] = []
    for _ in range(max_length):
        logits = policy.step_logits(scene.objects, said, prev)
        draw = int(np.argmax(logits))
        if draw == policy.eos_index:
            break
        token = policy.vocab[draw]
        out.append(token)
        if token in policy.class_index:
            said.add(token)
        prev = draw
    return out


def logprob(policy: ToyPolicy, scene: Scene, completion: list[str] | str) -> float:
    """Log-probability of a completion, including the terminating EOS step.

    An empty completion scores the single-step log-probability of EOS.
    Always <= 0.
    """
    policy.check_scene(scene)
    token_ids = (
        policy.encode(completion) if isinstance(completion, str) else
        [policy.token_index[t] if t in policy.token_index else _oov(t) for t in completion]
    )
    said: set[str] = set()
    prev: int | None = None
    total = 0.0
    for tid in token_ids + [policy.eos_index]:
        logits = policy.step_logits(scene.objects, said, prev)
        total += float(_log_softmax(logits)[tid])
        token = policy.vocab[tid]
        if token in policy.class_index:
            said.add(token)
        prev = tid
    return total


def _oov(token: str):
    raise DataError(f"token {token!r} is not in the policy vocabulary")


# ============================================================
# Pretraining
# ============================================================


def pretrain_reference(
    config: CorpusConfig, rng: np.random.Generator
) -> tuple[ToyPolicy, list[Scene]]:
    """Fit the reference captioner by maximum likelihood on a synthetic corpus.

    Deterministic: the same config and generator state yield a bit-identical
    parameter table. Returns the policy and the training scenes.
    """
    scenes = make_scenes(config.n_captions, config.world, rng, prefix="pretrain")
    captions = [synth_caption(s, config, rng) for s in scenes]
    policy = new_policy(config.world.classes)

    # Aggregate identical contexts so the fit is one dense matrix problem.
    counts: dict[tuple, np.ndarray] = {}
    v = len(policy.vocab)
    for scene, tokens in zip(scenes, captions):
        said: set[str] = set()
        prev: int | None = None
        for tid in [policy.token_index[t] for t in tokens] + [policy.eos_index]:
            key = (tuple(sorted(scene.objects)), tuple(sorted(said)), prev)
            if key not in counts:
                counts[key] = np.zeros(v)
            counts[key][tid] += 1.0
            token = policy.vocab[tid]
            if token in policy.class_index:
                said.add(token)
            prev = tid

    keys = sorted(counts, key=lambda k: (k[0], k[1], -1 if k[2] is None else k[2]))
    n_ctx = len(keys)
    X = np.zeros((n_ctx, policy.n_features))
    Y = np.zeros((n_ctx, v))
    for row, key in enumerate(keys):
        objs, said_t, prev = key
        X[row, policy.feature_indices(frozenset(objs), set(said_t), prev)] = 1.0
        Y[row] = counts[key]
    total = Y.sum()

    # Adam on the convex softmax-regression objective; full batch, so the
    # result depends only on the data and iteration count.
    theta = policy.params
    m = np.zeros_like(theta)
    s = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    row_tot = Y.sum(axis=1, keepdims=True)
    for it in range(1, config.fit_iters + 1):
        z = X @ theta
        z -= z.max(axis=1, keepdims=True)
        ez = np.exp(z)
        p = ez / ez.sum(axis=1, keepdims=True)
        grad = X.T @ (p * row_tot - Y) / total
        m = b1 * m + (1 - b1) * grad
        s = b2 * s + (1 - b2) * grad * grad
        mh = m / (1 - b1**it)
        sh = s / (1 - b2**it)
        theta -= config.fit_lr * mh / (np.sqrt(sh) + eps)

    return ToyPolicy(
        classes=policy.classes, connectives=policy.connectives, params=theta
    ), scenes


def scenes_to_jsonl_records(scenes: list[Scene]) -> list[dict]:
    return [
        {
            "image_id": s.image_id,
            "objects": sorted(s.objects),
            "co_occurrence_group": s.co_occurrence_group,
        }
        for s in scenes
    ]


def scenes_from_detections(
    truths: dict, classes: list[str]
) -> list[Scene]:
    """Build policy-consumable scenes from loaded ground-truth records."""
    known = set(classes)
    scenes = []
    for image_id in sorted(truths):
        objs = truths[image_id].objects
        unknown = objs - known
        if unknown:
            raise DataError(
                f"{image_id}: objects outside the policy class inventory: "
                + ", ".join(sorted(unknown))
            )
        scenes.append(Scene(image_id=image_id, objects=objs, co_occurrence_group=0))
    return scenes
