import math

import numpy as np
import pytest

from noisycre import contrastive as cl
from noisycre import models
from noisycre.attack import ContrastivePool
from noisycre.errors import ConfigurationError, IntegrityError


def _batch(z, labels, roles, anchors, tau=1.0):
    return cl.ContrastBatch(
        z=np.asarray(z, dtype=float),
        labels=np.asarray(labels),
        roles=np.asarray(roles),
        anchor_mask=np.asarray(anchors, dtype=bool),
        temperature=tau,
    )


def scalar_supcon(z, labels, pos_eligible, anchor_mask, tau):
    """Independent scalar re-computation of the pooled objective."""
    z = [np.asarray(v, dtype=float) for v in z]
    n = len(z)
    losses = []
    for i in range(n):
        if not anchor_mask[i]:
            continue
        positives = [
            j for j in range(n) if j != i and labels[j] == labels[i] and pos_eligible[j]
        ]
        if not positives:
            continue
        denom = sum(math.exp(float(z[i] @ z[k]) / tau) for k in range(n) if k != i)
        term = 0.0
        for j in positives:
            term += math.log(math.exp(float(z[i] @ z[j]) / tau) / denom)
        losses.append(-term / len(positives))
    return sum(losses) / len(losses) if losses else None


def test_single_positive_no_negative_is_zero():
    z = [[1.0, 0.0], [1.0, 0.0]]
    batch = _batch(z, [0, 0], [cl.ROLE_CLEAN] * 2, [True, False])
    result = cl.nacl_loss(batch)
    assert abs(result.loss) <= 1e-15


def test_one_pos_one_neg_hand_value():
    # anchor.pos = 1, anchor.neg = 0, tau = 1 -> loss = ln(1 + e^-1).
    z = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
    batch = _batch(z, [0, 0, 1], [cl.ROLE_CLEAN, cl.ROLE_CLEAN, cl.ROLE_NEG], [True, False, False])
    result = cl.nacl_loss(batch)
    assert abs(result.loss - math.log(1 + math.exp(-1))) <= 1e-10


def test_nacl_matches_scalar_recomputation():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(7, 5))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    labels = np.array([0, 0, 1, 1, 2, 0, 1])
    roles = np.array([
        cl.ROLE_CLEAN, cl.ROLE_CLEAN, cl.ROLE_CLEAN, cl.ROLE_ATT_POS,
        cl.ROLE_NEG, cl.ROLE_ATT_POS, cl.ROLE_NEG,
    ])
    anchors = roles == cl.ROLE_CLEAN
    batch = _batch(z, labels, roles, anchors, tau=0.3)
    result = cl.nacl_loss(batch)
    expected = scalar_supcon(z, labels, roles != cl.ROLE_NEG, anchors, 0.3)
    assert abs(result.loss - expected) <= 1e-10


def test_scl_all_same_relation_identical_z():
    # Identical features make every pairwise similarity equal, so the
    # per-anchor loss is exactly ln(n - 1); zero only at n = 2.
    for n in (2, 3, 5):
        z = np.tile([0.6, 0.8], (n, 1))
        result = cl.scl_loss(z, np.zeros(n, dtype=int), temperature=0.5)
        assert abs(result.loss - math.log(n - 1)) <= 1e-12


def test_scl_four_member_orthonormal_fixture():
    z = np.array([
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ])
    labels = np.array([0, 0, 1, 1])
    result = cl.scl_loss(z, labels, temperature=0.2)
    expected = scalar_supcon(z, labels, [True] * 4, [True] * 4, 0.2)
    assert abs(result.loss - expected) <= 1e-10


def test_scl_equals_nacl_on_pure_clean_pool():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(6, 4))
    labels = np.array([0, 1, 0, 1, 2, 2])
    batch = _batch(z, labels, [cl.ROLE_CLEAN] * 6, [True] * 6, tau=0.7)
    a = cl.nacl_loss(batch)
    b = cl.scl_loss(z, labels, temperature=0.7)
    assert a.loss == b.loss
    assert np.array_equal(a.dz, b.dz)


def test_permutation_invariance():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(6, 3))
    labels = np.array([0, 0, 1, 1, 0, 1])
    roles = np.array([cl.ROLE_CLEAN] * 4 + [cl.ROLE_ATT_POS, cl.ROLE_NEG])
    anchors = roles == cl.ROLE_CLEAN
    base = cl.nacl_loss(_batch(z, labels, roles, anchors, tau=0.4)).loss
    perm = np.random.default_rng(3).permutation(6)
    shuffled = cl.nacl_loss(_batch(z[perm], labels[perm], roles[perm], anchors[perm], tau=0.4)).loss
    assert abs(base - shuffled) <= 1e-10


def test_anchor_self_exclusion_duplicate_probe():
    # Duplicating the anchor's feature as an extra clean member must change
    # the loss (the copy lands in denominators and positive sets), proving
    # the anchor itself was excluded rather than silently included.
    z = np.array([[1.0, 0.0], [0.8, 0.6], [0.0, 1.0]])
    labels = np.array([0, 0, 1])
    roles = np.array([cl.ROLE_CLEAN, cl.ROLE_CLEAN, cl.ROLE_NEG])
    anchors = np.array([True, False, False])
    base = cl.nacl_loss(_batch(z, labels, roles, anchors)).loss
    z2 = np.vstack([z, z[0]])
    dup = cl.nacl_loss(
        _batch(z2, [0, 0, 1, 0], list(roles) + [cl.ROLE_CLEAN], [True, False, False, False])
    ).loss
    assert abs(base - dup) > 1e-6


def test_anchors_must_be_clean():
    z = np.zeros((2, 2))
    batch = _batch(z, [0, 0], [cl.ROLE_NEG, cl.ROLE_CLEAN], [True, False])
    with pytest.raises(IntegrityError):
        cl.nacl_loss(batch)


def test_temperature_validation():
    z = np.zeros((2, 2))
    batch = _batch(z, [0, 0], [cl.ROLE_CLEAN] * 2, [True, False], tau=0.0)
    with pytest.raises(ConfigurationError):
        cl.nacl_loss(batch)


def test_degenerate_batch_signal():
    # No anchor has a positive: loss is None and the skip is counted.
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    batch = _batch(z, [0, 1], [cl.ROLE_CLEAN, cl.ROLE_NEG], [True, False])
    result = cl.nacl_loss(batch)
    assert result.loss is None
    assert result.n_anchors == 0 and result.n_skipped == 1


def test_skipped_anchor_counting_partial():
    z = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
    labels = np.array([0, 0, 1])
    roles = np.array([cl.ROLE_CLEAN] * 3)
    anchors = np.array([True, True, True])  # the label-1 anchor has no positive
    result = cl.nacl_loss(_batch(z, labels, roles, anchors))
    assert result.n_anchors == 2 and result.n_skipped == 1


def test_nonnegativity_property():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n = int(rng.integers(2, 9))
        z = rng.normal(size=(n, 4))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        labels = rng.integers(0, 3, size=n)
        roles = rng.choice([cl.ROLE_CLEAN, cl.ROLE_ATT_POS, cl.ROLE_NEG], size=n)
        anchors = roles == cl.ROLE_CLEAN
        result = cl.nacl_loss(_batch(z, labels, roles, anchors, tau=float(rng.uniform(0.05, 1.0))))
        if result.loss is not None:
            assert result.loss >= -1e-12


def test_gradient_check_wrt_features():
    rng = np.random.default_rng(5)
    n = 6
    z = rng.normal(size=(n, 3))
    labels = np.array([0, 0, 1, 1, 0, 1])
    roles = np.array([cl.ROLE_CLEAN] * 4 + [cl.ROLE_ATT_POS, cl.ROLE_NEG])
    anchors = roles == cl.ROLE_CLEAN
    result = cl.nacl_loss(_batch(z, labels, roles, anchors, tau=0.3))

    def f(flat):
        out = cl.nacl_loss(_batch(flat.reshape(n, 3), labels, roles, anchors, tau=0.3))
        return out.loss

    report = models.finite_difference_report(f, z.ravel().copy(), result.dz.ravel())
    assert report.max_rel_error <= 1e-4

    scl = cl.scl_loss(z, labels, temperature=0.3)

    def g(flat):
        return cl.scl_loss(flat.reshape(n, 3), labels, temperature=0.3).loss

    report = models.finite_difference_report(g, z.ravel().copy(), scl.dz.ravel())
    assert report.max_rel_error <= 1e-4


def test_attack_as_positive_weakly_decreases_loss():
    # A member sitting right next to the anchor's positives lowers the
    # batch loss when promoted from hard negative to attacked positive.
    z = np.array([
        [1.0, 0.0],        # anchor, label 0
        [0.96, 0.28],      # clean positive
        [0.98, 0.20],      # the member in question, label 0
        [-1.0, 0.0],       # far negative, label 1
    ])
    labels = np.array([0, 0, 0, 1])
    anchors = np.array([True, False, False, False])
    as_neg = cl.nacl_loss(
        _batch(z, labels, [cl.ROLE_CLEAN, cl.ROLE_CLEAN, cl.ROLE_NEG, cl.ROLE_NEG], anchors, tau=0.5)
    ).loss
    as_pos = cl.nacl_loss(
        _batch(z, labels, [cl.ROLE_CLEAN, cl.ROLE_CLEAN, cl.ROLE_ATT_POS, cl.ROLE_NEG], anchors, tau=0.5)
    ).loss
    assert as_pos <= as_neg


# ---------------------------------------------------------------------------
# Batch planning
# ---------------------------------------------------------------------------


def _pool(clean, att_pos=(), neg=()):
    return ContrastivePool(
        clean=frozenset(clean),
        att_pos=frozenset(att_pos),
        neg=frozenset(neg),
        perturbed_inputs={i: np.zeros(2) for i in list(att_pos) + list(neg)},
    )


def test_make_batches_sizes_40_16():
    plans = cl.make_batches(_pool(range(40)), batch_size=16, seed=0)
    sizes = [len(p.anchor_ids) for p in plans]
    assert sizes == [16, 16, 8]


def test_make_batches_clean_only_pool():
    plans = cl.make_batches(_pool(range(10)), batch_size=4, seed=1)
    assert all(p.companion_ids == () for p in plans)


def test_make_batches_companions_without_replacement():
    pool = _pool(range(48), att_pos=range(100, 110), neg=range(200, 212))
    plans = cl.make_batches(pool, batch_size=16, seed=2)
    used = [i for p in plans for i in p.companion_ids]
    assert len(used) == len(set(used)) == 22
    anchors = [i for p in plans for i in p.anchor_ids]
    assert sorted(anchors) == list(range(48))
    for p in plans:
        assert len(p.companion_ids) <= 16


def test_make_batches_deterministic():
    pool = _pool(range(20), neg=range(50, 60))
    a = cl.make_batches(pool, batch_size=8, seed=3)
    b = cl.make_batches(pool, batch_size=8, seed=3)
    assert a == b
