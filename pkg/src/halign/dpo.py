"""Direct preference optimization for the log-linear captioner.

The loss for a ranked pair is -log sigmoid(beta * [(log pi(y_w) - log
ref(y_w)) - (log pi(y_l) - log ref(y_l))]): push the policy's margin between
winner and loser log-probabilities, relative to the frozen reference, through
a logistic. Beta scales how hard the pull away from the reference is
penalized; smaller beta lets the policy drift further. At initialization
(policy == reference) every pair's loss is exactly ln 2.

Gradients are closed form because the policy is log-linear: the gradient of
a completion's log-probability is features^T (onehot - softmax), summed over
steps. Optimization is Adam under a linear-warmup/cosine-decay schedule, with
periodic greedy-decoding validation scored by micro CHAIR_i; the checkpoint
with the lowest validation score is kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .evaluate import DecodingConfig, evaluate_policy, report_both_modes, validation_chair_i
from .io_utils import ConfigError, DataError, dump_json, sub_rng, write_jsonl
from .lexicon import SynonymLexicon
from .metrics import GroundTruth
from .preference import (
    BuildConfig,
    Dialogue,
    PreferenceDataset,
    PreferencePair,
    build_dataset,
    filter_tie_pairs,
    provenance_record,
    save_dataset,
    scale_holdout,
    split_validation,
)
from .toy_world import (
    SamplingConfig,
    Scene,
    ToyPolicy,
    logprob,
    sample,
    save_policy,
    scenes_to_jsonl_records,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Reference presets for full-size language models; the toy world trains
# with the defaults below (a linear model needs a far larger step).
LARGE_MODEL_PRESETS = {
    "7b": {"peak_lr": 2e-6, "batch_size": 64, "warmup_steps": 33},
    "13b": {"peak_lr": 2e-6, "batch_size": 16, "warmup_steps": 145},
}


@dataclass
class DpoConfig:
    beta: float = 0.2
    peak_lr: float = 1e-2
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 32
    validation_every: int = 100
    seed: int = 0
    max_length: int = 16
    kl_samples: int = 256

    def __post_init__(self):
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be nonnegative")
        if not 0 <= self.warmup_steps <= max(self.total_steps, 0):
            raise ConfigError("warmup_steps must lie in [0, total_steps]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.validation_every < 1:
            raise ConfigError("validation_every must be at least 1")
        if self.kl_samples < 1:
            raise ConfigError("kl_samples must be at least 1")

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "peak_lr": self.peak_lr,
            "warmup_steps": self.warmup_steps,
            "total_steps": self.total_steps,
            "batch_size": self.batch_size,
            "validation_every": self.validation_every,
            "seed": self.seed,
            "max_length": self.max_length,
            "kl_samples": self.kl_samples,
        }


@dataclass
class TrainState:
    policy: ToyPolicy
    reference: ToyPolicy
    scenes: dict[str, Scene]
    m1: np.ndarray = field(repr=False)
    m2: np.ndarray = field(repr=False)
    step: int = 0
    best_validation_chair_i: float = math.inf
    best_checkpoint: ToyPolicy | None = None
    best_step: int = 0


def init_state(
    reference: ToyPolicy, scenes: dict[str, Scene]
) -> TrainState:
    policy = reference.copy()
    return TrainState(
        policy=policy,
        reference=reference,
        scenes=scenes,
        m1=np.zeros_like(policy.params),
        m2=np.zeros_like(policy.params),
    )


def lr_at(step: int, config: DpoConfig) -> float:
    """Linear ramp 0 -> peak over warmup, then cosine decay to 0 at the end."""
    if step < 0 or step > config.total_steps:
        raise ConfigError(
            f"step {step} outside schedule range [0, {config.total_steps}]"
        )
    if config.total_steps == 0:
        return 0.0
    if step <= config.warmup_steps:
        if config.warmup_steps == 0:
            return config.peak_lr
        return config.peak_lr * step / config.warmup_steps
    span = config.total_steps - config.warmup_steps
    progress = (step - config.warmup_steps) / span
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ============================================================
# Loss and gradient
# ============================================================


def _pair_scene(state: TrainState, pair: PreferencePair) -> Scene:
    image_id = pair.context.image_id
    if image_id not in state.scenes:
        raise DataError(f"pair {pair.context.sample_id!r}: no scene for {image_id!r}")
    return state.scenes[image_id]


def _completion_design(
    policy: ToyPolicy, scene: Scene, text: str
) -> tuple[np.ndarray, np.ndarray]:
    """Per-step feature matrix and target indices for a completion + EOS.

    The features do not depend on the parameters, so they are computed once
    per pair and reused for every loss/gradient evaluation.
    """
    token_ids = policy.encode(text) + [policy.eos_index]
    X = np.zeros((len(token_ids), policy.n_features))
    said: set[str] = set()
    prev: int | None = None
    for row, tid in enumerate(token_ids):
        X[row, policy.feature_indices(scene.objects, said, prev)] = 1.0
        token = policy.vocab[tid]
        if token in policy.class_index:
            said.add(token)
        prev = tid
    return X, np.asarray(token_ids)


def _logprob_from_design(theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    z = X @ theta
    z -= z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float((z[np.arange(len(y)), y] - lse).sum())


def _grad_from_design(
    theta: np.ndarray, X: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray]:
    """(log-probability, gradient of it w.r.t. theta)."""
    z = X @ theta
    z -= z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    lp = float(np.log(p[np.arange(len(y)), y]).sum())
    resid = -p
    resid[np.arange(len(y)), y] += 1.0
    return lp, X.T @ resid


def _margin(
    state: TrainState, pair: PreferencePair, beta: float
) -> float:
    scene = _pair_scene(state, pair)
    delta_w = logprob(state.policy, scene, pair.winner) - logprob(
        state.reference, scene, pair.winner
    )
    delta_l = logprob(state.policy, scene, pair.loser) - logprob(
        state.reference, scene, pair.loser
    )
    return beta * (delta_w - delta_l)


def dpo_loss(state: TrainState, pair: PreferencePair, beta: float) -> float:
    """-log sigmoid of the pair margin; strictly positive, ln 2 at init."""
    return float(np.logaddexp(0.0, -_margin(state, pair, beta)))


def dpo_grad(
    state: TrainState, batch: list[PreferencePair], beta: float
) -> np.ndarray:
    """Mean gradient of the pair loss over a batch, as a parameter table.

    Per pair: -sigmoid(-margin) * beta * (grad logprob(winner) - grad
    logprob(loser)), accumulated in batch order.
    """
    if not batch:
        raise DataError("empty batch")
    total = np.zeros_like(state.policy.params)
    for pair in batch:
        scene = _pair_scene(state, pair)
        Xw, yw = _completion_design(state.policy, scene, pair.winner)
        Xl, yl = _completion_design(state.policy, scene, pair.loser)
        lp_w, g_w = _grad_from_design(state.policy.params, Xw, yw)
        lp_l, g_l = _grad_from_design(state.policy.params, Xl, yl)
        ref_w = _logprob_from_design(state.reference.params, Xw, yw)
        ref_l = _logprob_from_design(state.reference.params, Xl, yl)
        margin = beta * ((lp_w - ref_w) - (lp_l - ref_l))
        # sigmoid(-margin) computed in log space to stay finite everywhere
        weight = math.exp(-np.logaddexp(0.0, margin))
        total += -weight * beta * (g_w - g_l)
    return total / len(batch)


def adam_step(state: TrainState, grad: np.ndarray, lr: float) -> None:
    """One bias-corrected Adam update of the policy parameters in place.

    Uses state.step as the Adam timestep, so callers increment step first.
    Raises on non-finite gradient entries.
    """
    if not np.isfinite(grad).all():
        bad = int((~np.isfinite(grad)).sum())
        raise DataError(f"gradient has {bad} non-finite entries at step {state.step}")
    t = state.step
    if t < 1:
        raise ConfigError("adam_step requires state.step >= 1")
    state.m1 = ADAM_BETA1 * state.m1 + (1 - ADAM_BETA1) * grad
    state.m2 = ADAM_BETA2 * state.m2 + (1 - ADAM_BETA2) * grad * grad
    mh = state.m1 / (1 - ADAM_BETA1**t)
    sh = state.m2 / (1 - ADAM_BETA2**t)
    state.policy.params -= lr * mh / (np.sqrt(sh) + ADAM_EPS)


# ============================================================
# Training loop
# ============================================================


@dataclass
class TrainHandles:
    """World context the trainer needs but does not own."""

    scenes: dict[str, Scene]  # covers every train and validation image_id
    validation: list  # list of (sample_id, Scene) items for greedy scoring
    lexicon: SynonymLexicon


@dataclass
class TrainResult:
    final: ToyPolicy
    best: ToyPolicy
    best_validation_chair_i: float
    best_step: int
    log: list[dict]


def kl_estimate(
    policy: ToyPolicy,
    reference: ToyPolicy,
    scenes: list[Scene],
    n_samples: int,
    max_length: int,
    rng: np.random.Generator,
) -> float:
    """Monte Carlo KL(policy || reference) from policy samples at T=1."""
    cfg = SamplingConfig(temperature=1.0, max_length=max_length)
    total = 0.0
    for i in range(n_samples):
        scene = scenes[i % len(scenes)]
        y = sample(policy, scene, cfg, rng)
        total += logprob(policy, scene, y) - logprob(reference, scene, y)
    return total / n_samples


def train(
    dataset: PreferenceDataset,
    config: DpoConfig,
    reference: ToyPolicy,
    handles: TrainHandles,
) -> tuple[TrainResult, TrainState]:
    """Optimize a copy of the reference on ranked pairs.

    Validation runs at step 0, every validation_every steps, and at the last
    step: greedy completions on the validation prompts scored by micro
    CHAIR_i, plus a Monte Carlo KL estimate against the frozen reference.
    The best checkpoint is the one with the lowest validation score seen;
    equal scores refresh it, so the latest minimum wins. The reference is
    never written to.
    """
    if not dataset.pairs:
        raise DataError("empty training split")
    if not handles.validation:
        raise DataError("empty validation prompt list")
    state = init_state(reference, handles.scenes)
    pairs = dataset.pairs

    # cache design matrices and frozen-reference log-probabilities
    designs = []
    for pair in pairs:
        scene = _pair_scene(state, pair)
        Xw, yw = _completion_design(state.policy, scene, pair.winner)
        Xl, yl = _completion_design(state.policy, scene, pair.loser)
        ref_w = _logprob_from_design(reference.params, Xw, yw)
        ref_l = _logprob_from_design(reference.params, Xl, yl)
        designs.append((Xw, yw, Xl, yl, ref_w, ref_l))

    def eval_now(window_loss: float, window_acc: float) -> dict:
        val_score = validation_chair_i(
            state.policy, handles.validation, handles.lexicon, config.max_length
        )
        kl_rng = sub_rng(config.seed, "kl", state.step)
        kl = kl_estimate(
            state.policy,
            reference,
            [scene for _, scene in handles.validation],
            config.kl_samples,
            config.max_length,
            kl_rng,
        )
        entry = {
            "step": state.step,
            "loss": window_loss,
            "margin_acc": window_acc,
            "val_chair_i_micro": val_score,
            "kl_estimate": kl,
            "lr": lr_at(state.step, config),
        }
        # <= so equal scores refresh the snapshot: under a flat validation
        # curve the latest (most trained) checkpoint wins, not step 0
        if val_score <= state.best_validation_chair_i:
            state.best_validation_chair_i = val_score
            state.best_checkpoint = state.policy.copy()
            state.best_step = state.step
        return entry

    def batch_stats(idx: np.ndarray, with_grad: bool):
        loss_sum, acc_sum = 0.0, 0
        grad = np.zeros_like(state.policy.params) if with_grad else None
        theta = state.policy.params
        for i in idx:
            Xw, yw, Xl, yl, ref_w, ref_l = designs[i]
            if with_grad:
                lp_w, g_w = _grad_from_design(theta, Xw, yw)
                lp_l, g_l = _grad_from_design(theta, Xl, yl)
            else:
                lp_w = _logprob_from_design(theta, Xw, yw)
                lp_l = _logprob_from_design(theta, Xl, yl)
            margin = config.beta * ((lp_w - ref_w) - (lp_l - ref_l))
            loss_sum += float(np.logaddexp(0.0, -margin))
            acc_sum += 1 if margin > 0 else 0
            if with_grad:
                weight = math.exp(-np.logaddexp(0.0, margin))
                grad += -weight * config.beta * (g_w - g_l)
        n = len(idx)
        return loss_sum / n, acc_sum / n, (grad / n if with_grad else None)

    log_entries: list[dict] = []
    # step-0 entry: loss over the whole training set at initialization
    init_loss, init_acc, _ = batch_stats(np.arange(len(pairs)), with_grad=False)
    log_entries.append(eval_now(init_loss, init_acc))

    rng = sub_rng(config.seed, "train")
    window_losses: list[float] = []
    window_accs: list[float] = []
    done = state.step >= config.total_steps
    while not done:
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, acc, grad = batch_stats(idx, with_grad=True)
            state.step += 1
            adam_step(state, grad, lr_at(state.step, config))
            window_losses.append(loss)
            window_accs.append(acc)
            at_eval = (
                state.step % config.validation_every == 0
                or state.step == config.total_steps
            )
            if at_eval:
                log_entries.append(
                    eval_now(
                        float(np.mean(window_losses)), float(np.mean(window_accs))
                    )
                )
                window_losses.clear()
                window_accs.clear()
            if state.step >= config.total_steps:
                done = True
                break

    result = TrainResult(
        final=state.policy.copy(),
        best=state.best_checkpoint.copy(),
        best_validation_chair_i=state.best_validation_chair_i,
        best_step=state.best_step,
        log=log_entries,
    )
    return result, state


# ============================================================
# Iterated rounds
# ============================================================


@dataclass
class RoundsConfig:
    dpo: DpoConfig
    build: BuildConfig
    holdout: int = 500
    filter_ties: bool = True
    eval_temperature: float = 0.7


@dataclass
class RoundArtifacts:
    round_index: int
    out_dir: Path
    reference_id: str
    best_id: str
    summary: dict
    log: list[dict]


SourceFn = Callable[[int, ToyPolicy], list[tuple[Dialogue, Scene]]]


def iterate_rounds(
    rounds: int,
    config: RoundsConfig,
    reference: ToyPolicy,
    lexicon: SynonymLexicon,
    make_source: SourceFn,
    out_dir: str | Path,
) -> list[RoundArtifacts]:
    """Run build -> split -> train cycles, promoting the best checkpoint.

    Each round samples fresh preference data from the current policy, trains
    against it as the frozen reference, and the round's best checkpoint
    becomes both the sampler and the reference of the next round. Every
    round persists its dataset, splits, checkpoints, training log, and
    evaluation reports under out_dir/round_NN/.
    """
    if rounds < 1:
        raise ConfigError("rounds must be at least 1")
    out_dir = Path(out_dir)
    artifacts: list[RoundArtifacts] = []
    current = reference
    for r in range(rounds):
        rdir = out_dir / f"round_{r + 1:02d}"
        rdir.mkdir(parents=True, exist_ok=True)
        source = make_source(r, current)
        scenes = {scene.image_id: scene for _, scene in source}
        truths = {
            img: GroundTruth(image_id=img, objects=scene.objects)
            for img, scene in scenes.items()
        }

        build_cfg = BuildConfig(
            temperature=config.build.temperature,
            max_length=config.build.max_length,
            filter_ties=False,  # ties filtered after the split; see below
            seed=config.build.seed,
            round_index=r,
        )
        build_rng = sub_rng(config.build.seed, "build", r)
        # Build unfiltered so the filtered and --no-filter arms share the
        # same validation prompts; tie filtering applies to the train side.
        full = build_dataset(source, current, truths, lexicon, build_cfg, build_rng)
        holdout = scale_holdout(config.holdout, len(full))
        train_split, val_split = split_validation(full, holdout, config.build.seed)
        train_set = train_split if not config.filter_ties else filter_tie_pairs(train_split)

        save_dataset(full, rdir / "dataset.jsonl")
        dump_json(rdir / "dataset.provenance.json", provenance_record(full))
        save_dataset(train_set, rdir / "train_pairs.jsonl")
        save_dataset(val_split, rdir / "val_pairs.jsonl")
        write_jsonl(
            rdir / "scenes.jsonl",
            scenes_to_jsonl_records([scenes[i] for i in sorted(scenes)]),
        )

        val_items = [
            (p.context.sample_id, scenes[p.context.image_id]) for p in val_split.pairs
        ]
        handles = TrainHandles(scenes=scenes, validation=val_items, lexicon=lexicon)
        dpo_cfg = DpoConfig(**{**config.dpo.to_dict(), "seed": config.dpo.seed + r})
        result, _ = train(train_set, dpo_cfg, current, handles)

        save_policy(current, rdir / "policy_ref.json", meta={"round": r + 1, "role": "reference"})
        save_policy(result.final, rdir / "policy_final.json", meta={"round": r + 1, "role": "final"})
        save_policy(result.best, rdir / "policy_best.json", meta={"round": r + 1, "role": "best", "step": result.best_step})
        write_jsonl(rdir / "train_log.jsonl", result.log)

        summary = _round_summary(
            r, current, result, val_items, lexicon, config, train_split, train_set, full
        )
        dump_json(rdir / "summary.json", summary)
        artifacts.append(
            RoundArtifacts(
                round_index=r,
                out_dir=rdir,
                reference_id=current.checkpoint_id,
                best_id=result.best.checkpoint_id,
                summary=summary,
                log=result.log,
            )
        )
        current = result.best
    return artifacts


def _round_summary(
    r: int,
    reference: ToyPolicy,
    result: TrainResult,
    val_items: list,
    lexicon: SynonymLexicon,
    config: RoundsConfig,
    train_before: PreferenceDataset,
    train_set: PreferenceDataset,
    full: PreferenceDataset,
) -> dict:
    sampled = DecodingConfig(
        mode="sample",
        temperature=config.eval_temperature,
        max_length=config.dpo.max_length,
    )
    greedy = DecodingConfig(mode="greedy", max_length=config.dpo.max_length)
    has_targets = bool(lexicon.hallucinatory_targets)
    reports = {}
    for arm, policy in (("reference", reference), ("tuned", result.best)):
        arm_reports = {}
        for decname, dec in (("sampled", sampled), ("greedy", greedy)):
            rng = sub_rng(config.build.seed, "eval", r) if dec.mode == "sample" else None
            scores, _ = evaluate_policy(policy, val_items, lexicon, dec, rng)
            arm_reports[decname] = {
                "decoding": dec.to_dict(),
                **report_both_modes(scores, has_targets=has_targets),
            }
        reports[arm] = arm_reports
    ref_hal = reports["reference"]["sampled"]["micro"]["chair_s"]
    tuned_hal = reports["tuned"]["sampled"]["micro"]["chair_s"]
    return {
        "round": r + 1,
        "reference_id": reference.checkpoint_id,
        "best_id": result.best.checkpoint_id,
        "best_step": result.best_step,
        "best_validation_chair_i": result.best_validation_chair_i,
        "n_train_pairs": len(train_set.pairs),
        "n_val_pairs": len(val_items),
        "n_total_pairs": len(full.pairs),
        "tie_filter_rate": (len(train_before.pairs) - len(train_set.pairs))
        / len(train_before.pairs)
        if train_before.pairs
        else 0.0,
        "final_kl_estimate": result.log[-1]["kl_estimate"],
        "final_margin_acc": result.log[-1]["margin_acc"],
        "hal_rate_reference": ref_hal,
        "hal_rate_tuned": tuned_hal,
        "hal_rate_relative_reduction": (ref_hal - tuned_hal) / ref_hal
        if ref_hal > 0
        else 0.0,
        "reports": reports,
    }
