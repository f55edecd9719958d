"""Exemplar memory, prototypes and nearest-class-mean inference.

Exemplars are chosen per relation by clustering the pseudo-clean members
in encoder space and keeping the sample nearest each cluster center.
Prototypes are plain means of the exemplars' projected features; queries
are answered by the nearest prototype, ties broken toward the lowest
relation id.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import models
from .errors import ConfigurationError, IntegrityError

logger = logging.getLogger(__name__)


@dataclass
class MemoryBuffer:
    capacity: int = 20
    store: dict[int, list] = field(default_factory=dict)

    def relations(self) -> list[int]:
        return sorted(self.store)

    def exemplars(self) -> list:
        return [ex for r in self.relations() for ex in self.store[r]]

    def __len__(self) -> int:
        return sum(len(v) for v in self.store.values())


@dataclass
class PrototypeSet:
    prototypes: dict[int, np.ndarray]
    feature_revision: int


def _squared_distances(points, centers):
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def kmeans(points, k: int, seed: int, max_iter: int = 100):
    """Seeded k-means++ initialization plus Lloyd iterations.

    Runs to an assignment fixpoint or ``max_iter`` rounds; k is lowered to
    the number of points when there are too few.  Returns (assignments,
    centers).  Inertia is asserted non-increasing across iterations.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ConfigurationError("points must be a nonempty 2-D array")
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    k = min(k, len(points))
    rng = np.random.default_rng(seed)

    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(len(points))]
    for j in range(1, k):
        d2 = _squared_distances(points, centers[:j]).min(axis=1)
        total = d2.sum()
        if total <= 0:
            pick = int(rng.integers(len(points)))
        else:
            pick = int(rng.choice(len(points), p=d2 / total))
        centers[j] = points[pick]

    prev_assign = None
    prev_inertia = np.inf
    for _ in range(max_iter):
        d2 = _squared_distances(points, centers)
        assign = d2.argmin(axis=1)
        inertia = d2[np.arange(len(points)), assign].sum()
        assert inertia <= prev_inertia * (1 + 1e-9) + 1e-12, "inertia increased"
        prev_inertia = inertia
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        for j in range(k):
            members = points[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                # Reseed an empty cluster at the point farthest from its center.
                far = d2[np.arange(len(points)), assign].argmax()
                centers[j] = points[far]
        prev_assign = assign
    return assign, centers


def select_exemplars(examples, model, capacity: int, seed: int):
    """Cluster one relation's clean members in encoder space and keep the
    member nearest each center (ties toward the lowest example id)."""
    if not examples:
        return []
    ordered = sorted(examples, key=lambda e: e.id)
    features = models.hidden_batch(model, ordered)
    k = min(capacity, len(ordered))
    assign, centers = kmeans(features, k, seed)
    exemplars = []
    for j in range(k):
        best = None
        best_d = np.inf
        for ex, h, a in zip(ordered, features, assign):
            if a != j:
                continue
            d = float(np.linalg.norm(h - centers[j]))
            if d < best_d:
                best, best_d = ex, d
        if best is not None:
            exemplars.append(best)
    return exemplars


def update_buffer(buffer: MemoryBuffer, clean_examples, task_relations, model, seed: int) -> MemoryBuffer:
    """Insert exemplars for the current task's relations.

    Earlier relations are untouched; inserting a relation twice is a
    bookkeeping bug.  Relations with no clean members are skipped with a
    warning and get no prototype.
    """
    by_relation: dict[int, list] = {}
    for ex in clean_examples:
        by_relation.setdefault(ex.observed_label, []).append(ex)
    for r in sorted(task_relations):
        if r in buffer.store:
            raise IntegrityError(f"relation {r} already has exemplars in the buffer")
        members = by_relation.get(r)
        if not members:
            logger.warning("relation %d has no clean examples; skipping exemplars", r)
            continue
        child_seed = int(np.random.SeedSequence([seed, r]).generate_state(1)[0])
        buffer.store[r] = select_exemplars(members, model, buffer.capacity, child_seed)
    return buffer


def compute_prototypes(buffer: MemoryBuffer, model) -> PrototypeSet:
    """Mean projected feature per stored relation; tagged with the model
    revision so stale sets are detectable."""
    prototypes = {}
    for r in buffer.relations():
        Z = models.projected_batch(model, buffer.store[r])
        prototypes[r] = Z.mean(axis=0)
    return PrototypeSet(prototypes=prototypes, feature_revision=model.revision)


def is_stale(prototypes: PrototypeSet, model) -> bool:
    return prototypes.feature_revision != model.revision


def ncm_predict(example, prototypes: PrototypeSet, model) -> int:
    """Relation of the nearest prototype to the example's projected
    feature; ties go to the lowest relation id."""
    if not prototypes.prototypes:
        raise ConfigurationError("no prototypes available")
    z = models.projected_batch(model, [example])[0]
    relations = sorted(prototypes.prototypes)
    mat = np.stack([prototypes.prototypes[r] for r in relations])
    return relations[int(np.linalg.norm(mat - z, axis=1).argmin())]


def ncm_predict_batch(Z, prototypes: PrototypeSet) -> np.ndarray:
    """Vectorized nearest-prototype labels for precomputed features."""
    relations = sorted(prototypes.prototypes)
    mat = np.stack([prototypes.prototypes[r] for r in relations])
    d2 = ((Z[:, None, :] - mat[None, :, :]) ** 2).sum(axis=2)
    picks = d2.argmin(axis=1)
    rel = np.array(relations)
    return rel[picks]


def write_buffer_manifest(buffer: MemoryBuffer, path, corrupted_flags=None) -> None:
    """Per-relation exemplar ids (and purity flags when available)."""
    doc = {"capacity": buffer.capacity, "relations": []}
    for r in buffer.relations():
        entry = {"relation": r, "exemplars": [ex.id for ex in buffer.store[r]]}
        if corrupted_flags is not None:
            entry["corrupted"] = [int(corrupted_flags[ex.id]) for ex in buffer.store[r]]
        doc["relations"].append(entry)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
