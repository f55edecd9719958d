"""Noise-guided targeted perturbation of pseudo-noisy inputs.

Each pseudo-noisy input is nudged inside an elementwise epsilon-ball so
the auxiliary classifier leans toward its observed label; a perturbed
sample counts as successfully attacked when its encoder representation
lands within the clean radius of that relation's centroid.  Survivors of
the split become extra positives or hard negatives for the contrastive
pool.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from .errors import ConfigurationError, IntegrityError, NumericalError, ValidationError


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    steps: int = 5
    lam: float = 0.1
    step_size: float | None = None  # defaults to epsilon
    seed: int = 0

    def validate(self):
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")
        if self.steps < 0:
            raise ConfigurationError("steps must be >= 0")

    @property
    def alpha(self) -> float:
        return self.epsilon if self.step_size is None else self.step_size


@dataclass
class CentroidStats:
    centroids: dict[int, np.ndarray]
    d_max: dict[int, float]


@dataclass
class ContrastivePool:
    clean: frozenset
    att_pos: frozenset
    neg: frozenset
    perturbed_inputs: dict[int, np.ndarray]


@dataclass
class AttackOutcome:
    perturbed: dict[int, np.ndarray]
    ball_violation: float
    target_prob_start: float | None
    target_prob_end: float | None


def kl_divergence(p, q) -> float:
    """Kullback-Leibler divergence with a 1e-12 floor on both arguments."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValidationError(f"length mismatch: {p.shape} vs {q.shape}")
    p = np.maximum(p, 1e-12)
    q = np.maximum(q, 1e-12)
    return float(np.sum(p * np.log(p / q)))


def _objective_grads(model, embedded_list, targets, p_orig, lam):
    """Pooled-input gradients of CE-to-target plus lam * KL(p_orig || p')."""
    X = models.pool_batch(embedded_list)
    tape = models.forward_aux_batch(model, X)
    d_logits = tape.probs.copy()
    d_logits[np.arange(len(targets)), targets] -= 1.0
    if lam:
        d_logits += lam * (tape.probs - p_orig)
    _, dX = models.backward_aux(model, tape, d_logits, need_input_grad=True)
    if not np.all(np.isfinite(dX)):
        raise NumericalError("non-finite input gradient during attack")
    return models.unpool_grads(embedded_list, dX), tape.probs


def attack_objective(model, embedded, original_embedded, target: int, lam: float) -> float:
    """Scalar attack objective at one perturbed input (for verification)."""
    logits, probs = models.forward_aux(model, embedded)
    _, p0 = models.forward_aux(model, original_embedded)
    shifted = logits - logits.max()
    ce = float(np.log(np.exp(shifted).sum()) - shifted[target])
    return ce + lam * kl_divergence(p0, probs)


def _attack_batch(
    model,
    embedded_list,
    targets,
    config: AttackConfig,
    deltas,
    record_steps: bool = False,
):
    """Run the fixed-step update on a batch of embedded inputs.

    Every step moves from the *original* input by alpha along the signed
    gradient and projects back into the epsilon-ball, so iterates can
    never leave the ball; the worst excursion is still measured and
    returned for audit.
    """
    originals = [np.asarray(e, dtype=np.float64) for e in embedded_list]
    current = [x0 + d for x0, d in zip(originals, deltas)]
    p_orig = models.forward_aux_batch(model, models.pool_batch(originals)).probs
    idx = np.arange(len(targets))
    start_probs = models.forward_aux_batch(model, models.pool_batch(current)).probs[idx, targets]
    violation = max(
        (float(np.max(np.abs(x - x0))) for x, x0 in zip(current, originals)),
        default=0.0,
    ) - config.epsilon
    trajectory = [[x.copy() for x in current]] if record_steps else None
    for _ in range(config.steps):
        grads, _ = _objective_grads(model, current, targets, p_orig, config.lam)
        nxt = []
        for x0, g in zip(originals, grads):
            x = np.clip(x0 - config.alpha * np.sign(g), x0 - config.epsilon, x0 + config.epsilon)
            violation = max(violation, float(np.max(np.abs(x - x0))) - config.epsilon)
            nxt.append(x)
        current = nxt
        if record_steps:
            trajectory.append([x.copy() for x in current])
    end_probs = models.forward_aux_batch(model, models.pool_batch(current)).probs[idx, targets]
    return current, violation, start_probs, end_probs, trajectory


def noise_guided_attack(
    model,
    embedded,
    target: int,
    config: AttackConfig,
    init_delta: np.ndarray | None = None,
    return_trajectory: bool = False,
):
    """Perturb one embedded input toward a target class.

    The perturbation starts at a uniform draw from the epsilon-ball
    (``init_delta`` overrides it, e.g. for hand-checked runs) and applies
    ``config.steps`` signed-gradient updates of the cross-entropy plus
    KL-disruption objective.
    """
    config.validate()
    x0 = np.asarray(embedded, dtype=np.float64)
    if init_delta is None:
        rng = np.random.default_rng(config.seed)
        init_delta = rng.uniform(-config.epsilon, config.epsilon, size=x0.shape)
    out, _, _, _, traj = _attack_batch(
        model, [x0], np.array([target]), config, [np.asarray(init_delta)], record_steps=return_trajectory
    )
    if return_trajectory:
        return out[0], [steps[0] for steps in traj]
    return out[0]


def attack_noisy_set(
    model,
    noisy_examples,
    relations,
    config: AttackConfig,
    seed: int | None = None,
) -> AttackOutcome:
    """Attack every pseudo-noisy example toward its observed label.

    Deterministic given the seed: examples are processed in id order and
    initial perturbations are drawn in that order.
    """
    config.validate()
    if not noisy_examples:
        return AttackOutcome({}, 0.0, None, None)
    index = {r: i for i, r in enumerate(relations)}
    ordered = sorted(noisy_examples, key=lambda e: e.id)
    targets = np.array([index[e.observed_label] for e in ordered], dtype=np.intp)
    embedded = [models.embed_input(model, e.input) for e in ordered]
    rng = np.random.default_rng(config.seed if seed is None else seed)
    deltas = [rng.uniform(-config.epsilon, config.epsilon, size=x.shape) for x in embedded]
    out, violation, start_probs, end_probs, _ = _attack_batch(
        model, embedded, targets, config, deltas
    )
    return AttackOutcome(
        perturbed={e.id: x for e, x in zip(ordered, out)},
        ball_violation=violation,
        target_prob_start=float(start_probs.mean()),
        target_prob_end=float(end_probs.mean()),
    )


def centroid_stats(main_model, clean_examples) -> CentroidStats:
    """Relation-wise centroids and max clean radius in encoder space."""
    by_relation: dict[int, list] = {}
    for ex in clean_examples:
        by_relation.setdefault(ex.observed_label, []).append(ex)
    centroids, d_max = {}, {}
    for r in sorted(by_relation):
        H = models.hidden_batch(main_model, by_relation[r])
        c = H.mean(axis=0)
        centroids[r] = c
        d_max[r] = float(np.linalg.norm(H - c, axis=1).max())
    return CentroidStats(centroids=centroids, d_max=d_max)


def attack_success_rate(main_model, perturbed: dict, stats: CentroidStats, noisy_examples):
    """Fraction of attacked samples inside their observed relation's
    clean radius; returns (rate or None when undefined, per-id flags).

    Relations without a clean centroid count their members as failures
    without shrinking the denominator.
    """
    if not noisy_examples:
        return None, {}
    ordered = sorted(noisy_examples, key=lambda e: e.id)
    missing = [e.id for e in ordered if e.id not in perturbed]
    if missing:
        raise IntegrityError(f"missing perturbed input for ids {missing[:5]}")
    hidden = models.hidden_from_embedded(main_model, [perturbed[e.id] for e in ordered])
    flags = {}
    for ex, h in zip(ordered, hidden):
        r = ex.observed_label
        if r not in stats.centroids:
            flags[ex.id] = False
            continue
        flags[ex.id] = bool(np.linalg.norm(h - stats.centroids[r]) <= stats.d_max[r])
    rate = sum(flags.values()) / len(ordered)
    return rate, flags


def build_pool(selection, success_flags: dict, perturbed: dict) -> ContrastivePool:
    """Assemble the contrastive pool from the selection split and flags."""
    if set(success_flags) != set(selection.noisy):
        raise IntegrityError("success flags must cover exactly the pseudo-noisy set")
    missing = sorted(set(selection.noisy) - set(perturbed))
    if missing:
        raise IntegrityError(f"missing perturbed input for ids {missing[:5]}")
    att_pos = frozenset(i for i in selection.noisy if success_flags[i])
    neg = frozenset(i for i in selection.noisy if not success_flags[i])
    return ContrastivePool(
        clean=frozenset(selection.clean),
        att_pos=att_pos,
        neg=neg,
        perturbed_inputs={i: perturbed[i] for i in selection.noisy},
    )
