"""Temperature-scaled contrastive objectives over the sample pool.

The task objective contrasts clean anchors against the whole batch
(clean members, successfully attacked members acting as extra positives
for their observed label, and hard negatives); the replay objective is
the same functional form over memory-buffer batches, where every member
anchors and positives are same-relation members.  Both return analytic
gradients with respect to the projected features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, IntegrityError

ROLE_CLEAN = 0
ROLE_ATT_POS = 1
ROLE_NEG = 2


@dataclass
class ContrastBatch:
    z: np.ndarray           # (n, proj_dim) projected features
    labels: np.ndarray      # (n,) observed relation of each member
    roles: np.ndarray       # (n,) ROLE_* codes
    anchor_mask: np.ndarray  # (n,) True for members anchoring this batch
    temperature: float


@dataclass
class ContrastLoss:
    loss: float | None      # None signals a degenerate batch (all anchors skipped)
    dz: np.ndarray
    n_anchors: int
    n_skipped: int


@dataclass
class BatchPlan:
    anchor_ids: tuple[int, ...]
    companion_ids: tuple[int, ...]


def _supcon(z, labels, pos_eligible, anchor_mask, tau) -> ContrastLoss:
    """Shared core: mean over anchors of
    -(1/|P|) sum_{j in P} log( exp(z_i.z_j/tau) / sum_{k != i} exp(z_i.z_k/tau) ).

    Anchors with an empty positive set are skipped and counted.
    """
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    z = np.asarray(z, dtype=np.float64)
    n = len(z)
    labels = np.asarray(labels)
    eye = np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & pos_eligible[None, :] & ~eye
    counts = pos.sum(axis=1)
    used = anchor_mask & (counts > 0)
    n_used = int(used.sum())
    n_skipped = int(anchor_mask.sum()) - n_used
    if n_used == 0:
        return ContrastLoss(loss=None, dz=np.zeros_like(z), n_anchors=0, n_skipped=n_skipped)

    S = z @ z.T / tau
    off = np.where(eye, -np.inf, S)
    row_max = off.max(axis=1)
    E = np.exp(off - row_max[:, None])
    E[eye] = 0.0
    denom = E.sum(axis=1)
    lse = row_max + np.log(denom)

    safe_counts = np.maximum(counts, 1)
    per_anchor = lse - (S * pos).sum(axis=1) / safe_counts
    loss = float(per_anchor[used].mean())

    P = E / denom[:, None]
    dS = np.zeros_like(S)
    dS[used] = (P[used] - pos[used] / safe_counts[used, None]) / n_used
    dz = (dS @ z + dS.T @ z) / tau
    return ContrastLoss(loss=loss, dz=dz, n_anchors=n_used, n_skipped=n_skipped)


def nacl_loss(batch: ContrastBatch) -> ContrastLoss:
    """Task objective over the contrastive pool.

    Positives for an anchor are same-label members whose role is clean or
    attacked-positive; negatives only ever appear in the denominator.
    """
    if np.any(batch.anchor_mask & (batch.roles != ROLE_CLEAN)):
        raise IntegrityError("anchors must come from the clean role")
    pos_eligible = batch.roles != ROLE_NEG
    return _supcon(batch.z, batch.labels, pos_eligible, batch.anchor_mask, batch.temperature)


def scl_loss(z, labels, temperature: float) -> ContrastLoss:
    """Replay objective over a memory-buffer batch: every member anchors
    and same-relation members are its positives."""
    n = len(z)
    all_true = np.ones(n, dtype=bool)
    return _supcon(z, labels, all_true, all_true, temperature)


def make_batches(pool, batch_size: int, seed: int) -> list[BatchPlan]:
    """Plan one epoch of batches: shuffled clean anchors in chunks of
    ``batch_size``, each joined by up to ``batch_size`` companions drawn
    without replacement from the attacked sets."""
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    clean = sorted(pool.clean)
    companions = sorted(pool.att_pos | pool.neg)
    clean_order = [clean[i] for i in rng.permutation(len(clean))]
    comp_order = [companions[i] for i in rng.permutation(len(companions))]
    plans = []
    for b, start in enumerate(range(0, len(clean_order), batch_size)):
        anchors = tuple(clean_order[start : start + batch_size])
        comps = tuple(comp_order[b * batch_size : (b + 1) * batch_size])
        plans.append(BatchPlan(anchor_ids=anchors, companion_ids=comps))
    return plans
