"""Contaminated continual task streams.

Builds ordered task sequences from synthetic Gaussian-cluster data or
ingested token corpora: labels are corrupted at an exact global rate,
relations are partitioned into balanced tasks, and every example keeps
enough provenance (gold label, corruption flag) for audits.  All
functions are pure and deterministic given their seeds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    CapacityError,
    ConfigurationError,
    ParseError,
    StreamLookupError,
    ValidationError,
)

VECTOR = "vector"
TOKENS = "tokens"

CLEAN = "clean"
CLOSED_SET = "closed-set"
OPEN_SET = "open-set"

# Reserved token ids wrapping the two entity mentions; regular vocabulary
# ids start after these.
HEAD_OPEN, HEAD_CLOSE, TAIL_OPEN, TAIL_CLOSE = 0, 1, 2, 3
N_MARKER_TOKENS = 4


@dataclass(frozen=True, eq=False)
class InputRep:
    """One model input: a raw feature vector or a marked token sequence.

    ``head`` and ``tail`` give the positions of the opening/closing
    entity-marker tokens inside ``tokens``.
    """

    kind: str
    vector: np.ndarray | None = None
    tokens: tuple[int, ...] | None = None
    head: tuple[int, int] | None = None
    tail: tuple[int, int] | None = None


@dataclass(frozen=True, eq=False)
class Example:
    id: int
    input: InputRep
    gold_label: int
    observed_label: int

    @property
    def is_corrupted(self) -> bool:
        return self.gold_label != self.observed_label


@dataclass(frozen=True)
class NoiseSpec:
    """Label-corruption recipe: rate, protocol and the seed that fixes it."""

    rate: float
    protocol: str = "uniform-flip"
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigurationError(f"noise rate must be in [0, 1], got {self.rate}")
        if self.protocol not in ("uniform-flip", "global-ood"):
            raise ConfigurationError(f"unknown noise protocol {self.protocol!r}")


@dataclass
class Task:
    index: int
    relations: tuple[int, ...]
    train: list[Example]
    test: list[Example]


@dataclass
class TaskStream:
    tasks: list[Task]
    relation_to_task: dict[int, int]
    n_tasks: int
    noise_rate: float
    ood_pool: list[Example] | None = None
    seeds: dict[str, int] = field(default_factory=dict)
    _train_ids: list[frozenset] = field(default_factory=list, repr=False)

    def train_ids(self, task_index: int) -> frozenset:
        if not self._train_ids:
            self._train_ids = [frozenset(e.id for e in t.train) for t in self.tasks]
        return self._train_ids[task_index]


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------


def _place_means(n: int, dim: int, separation: float, rng, spread: float = 2.0) -> np.ndarray:
    """Sample cluster means with pairwise distance >= separation.

    Candidates are drawn from an isotropic Gaussian sized so typical gaps
    sit around ``spread`` times the floor; the scale grows when rejection
    stalls.
    """
    scale = spread * separation / math.sqrt(2.0 * dim)
    means: list[np.ndarray] = []
    misses = 0
    while len(means) < n:
        cand = rng.normal(0.0, scale, size=dim)
        if not means or np.linalg.norm(np.asarray(means) - cand, axis=1).min() >= separation:
            means.append(cand)
            misses = 0
        else:
            misses += 1
            if misses >= 200:
                scale *= 1.15
                misses = 0
    return np.asarray(means)


def generate_synthetic(
    n_relations: int,
    per_relation: int,
    input_dim: int,
    separation: float,
    seed: int,
    relation_base: int = 0,
    id_base: int = 0,
) -> list[Example]:
    """Generate unit-variance Gaussian clusters, one relation per cluster.

    Every example starts clean (gold == observed).  ``relation_base`` and
    ``id_base`` offset labels and ids so disjoint pools (e.g. for
    out-of-distribution noise) can coexist with a primary dataset.
    """
    if n_relations < 2:
        raise ConfigurationError("need at least 2 relations")
    if per_relation < 2:
        raise ConfigurationError("need at least 2 examples per relation")
    if input_dim < 1:
        raise ConfigurationError("input_dim must be positive")
    if separation <= 0:
        raise ConfigurationError("separation must be positive")

    rng = np.random.default_rng(seed)
    means = _place_means(n_relations, input_dim, separation, rng)
    examples = []
    next_id = id_base
    for r in range(n_relations):
        points = means[r] + rng.standard_normal((per_relation, input_dim))
        label = relation_base + r
        for row in points:
            examples.append(
                Example(
                    id=next_id,
                    input=InputRep(kind=VECTOR, vector=row),
                    gold_label=label,
                    observed_label=label,
                )
            )
            next_id += 1
    return examples


# ---------------------------------------------------------------------------
# JSONL ingestion
# ---------------------------------------------------------------------------


@dataclass
class Corpus:
    examples: list[Example]
    relation_names: list[str]
    token_vocab: dict


def _insert_markers(tokens: list[int], head, tail):
    """Wrap the head/tail spans with marker tokens; spans are half-open."""
    (hs, he), (ts, te) = head, tail
    spans = sorted([(hs, he, HEAD_OPEN, HEAD_CLOSE), (ts, te, TAIL_OPEN, TAIL_CLOSE)])
    if spans[0][1] > spans[1][0]:
        raise ValidationError("head and tail spans overlap")
    out: list[int] = []
    marks = {}
    cursor = 0
    for s, e, mo, mc in spans:
        out.extend(tokens[cursor:s])
        open_pos = len(out)
        out.append(mo)
        out.extend(tokens[s:e])
        out.append(mc)
        marks[mo] = (open_pos, len(out) - 1)
        cursor = e
    out.extend(tokens[cursor:])
    return tuple(out), marks[HEAD_OPEN], marks[TAIL_OPEN]


def ingest_jsonl(path) -> Corpus:
    """Read a JSONL relation corpus into token-kind examples.

    Each line must hold ``tokens`` (list), ``head``/``tail`` (half-open
    ``[start, end)`` spans) and ``relation`` (string).  Relation and token
    vocabularies are assigned ids in first-seen order; four marker ids are
    reserved ahead of the token vocabulary.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"no such file: {path}")
    relation_names: list[str] = []
    relation_ids: dict[str, int] = {}
    token_vocab: dict = {}
    examples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            for key in ("tokens", "head", "tail", "relation"):
                if key not in rec:
                    raise ParseError(f"line {lineno}: missing field {key!r}")
            raw_tokens = rec["tokens"]
            if not isinstance(raw_tokens, list) or not raw_tokens:
                raise ParseError(f"line {lineno}: tokens must be a nonempty list")
            for span_name in ("head", "tail"):
                span = rec[span_name]
                if not (isinstance(span, list) and len(span) == 2):
                    raise ParseError(f"line {lineno}: {span_name} must be [start, end]")
                s, e = span
                if not (0 <= s < e <= len(raw_tokens)):
                    raise ValidationError(
                        f"line {lineno}: {span_name} span {span} out of range for "
                        f"{len(raw_tokens)} tokens"
                    )
            for tok in raw_tokens:
                if tok not in token_vocab:
                    token_vocab[tok] = N_MARKER_TOKENS + len(token_vocab)
            ids = [token_vocab[tok] for tok in raw_tokens]
            marked, head_pos, tail_pos = _insert_markers(
                ids, tuple(rec["head"]), tuple(rec["tail"])
            )
            rel = rec["relation"]
            if rel not in relation_ids:
                relation_ids[rel] = len(relation_names)
                relation_names.append(rel)
            label = relation_ids[rel]
            examples.append(
                Example(
                    id=len(examples),
                    input=InputRep(kind=TOKENS, tokens=marked, head=head_pos, tail=tail_pos),
                    gold_label=label,
                    observed_label=label,
                )
            )
    return Corpus(examples=examples, relation_names=relation_names, token_vocab=token_vocab)


# ---------------------------------------------------------------------------
# Noise injection
# ---------------------------------------------------------------------------


def corruption_count(rate: float, n: int) -> int:
    """Number of corrupted examples: rate*n rounded half-up."""
    return int(math.floor(rate * n + 0.5))


def inject_noise(
    dataset: list[Example],
    spec: NoiseSpec,
    ood_pool: list[Example] | None = None,
) -> list[Example]:
    """Corrupt exactly ``corruption_count(rate, N)`` labels.

    uniform-flip resamples the observed label uniformly over the other
    relations.  global-ood swaps the whole example for one from a pool
    with a disjoint gold-label space, relabelled with the displaced
    example's relation; the pool example keeps its own id and gold label
    so the corruption stays auditable.
    """
    spec.validate()
    if not dataset:
        raise ConfigurationError("dataset is empty")
    n_flip = corruption_count(spec.rate, len(dataset))
    rng = np.random.default_rng(spec.seed)
    victims = sorted(rng.choice(len(dataset), size=n_flip, replace=False))
    relations = sorted({e.gold_label for e in dataset})

    out = list(dataset)
    if spec.protocol == "uniform-flip":
        if n_flip and len(relations) < 2:
            raise ConfigurationError("uniform-flip needs at least 2 relations")
        index_of = {r: i for i, r in enumerate(relations)}
        for pos in victims:
            ex = out[pos]
            # Draw from the other relations by skipping the example's own slot.
            j = int(rng.integers(len(relations) - 1))
            if j >= index_of[ex.observed_label]:
                j += 1
            out[pos] = replace(ex, observed_label=relations[j])
    else:  # global-ood
        if ood_pool is None:
            raise ConfigurationError("global-ood protocol requires an ood_pool")
        if len(ood_pool) < n_flip:
            raise CapacityError(
                f"ood pool holds {len(ood_pool)} examples, need {n_flip}"
            )
        pool_golds = {e.gold_label for e in ood_pool}
        if pool_golds & set(relations):
            raise ValidationError("ood pool gold labels overlap the dataset's")
        ids = {e.id for e in dataset}
        if ids & {e.id for e in ood_pool}:
            raise ValidationError("ood pool ids collide with dataset ids")
        picks = rng.choice(len(ood_pool), size=n_flip, replace=False)
        for pos, pick in zip(victims, picks):
            out[pos] = replace(ood_pool[pick], observed_label=out[pos].gold_label)
    return out


# ---------------------------------------------------------------------------
# Task partitioning and taxonomy
# ---------------------------------------------------------------------------


def balanced_sizes(n_relations: int, n_tasks: int) -> list[int]:
    base, rem = divmod(n_relations, n_tasks)
    return [base + 1 if t < rem else base for t in range(n_tasks)]


def partition_tasks(
    dataset: list[Example],
    n_tasks: int,
    seed: int,
    test_dataset: list[Example] | None = None,
    noise_rate: float | None = None,
    ood_pool: list[Example] | None = None,
    seeds: dict | None = None,
) -> TaskStream:
    """Randomly assign observed relations to balanced tasks.

    Training examples follow their observed label; held-out test examples
    (always clean) follow their gold label.
    """
    relations = sorted({e.observed_label for e in dataset})
    if n_tasks < 1 or n_tasks > len(relations):
        raise ConfigurationError(
            f"n_tasks={n_tasks} incompatible with {len(relations)} relations"
        )
    rng = np.random.default_rng(seed)
    order = [relations[i] for i in rng.permutation(len(relations))]
    sizes = balanced_sizes(len(relations), n_tasks)
    relation_to_task: dict[int, int] = {}
    groups: list[tuple[int, ...]] = []
    cursor = 0
    for t, size in enumerate(sizes):
        members = tuple(sorted(order[cursor : cursor + size]))
        groups.append(members)
        for r in members:
            relation_to_task[r] = t
        cursor += size

    tasks = [Task(index=t, relations=groups[t], train=[], test=[]) for t in range(n_tasks)]
    for ex in dataset:
        tasks[relation_to_task[ex.observed_label]].train.append(ex)
    for ex in test_dataset or []:
        t = relation_to_task.get(ex.gold_label)
        if t is None:
            raise ConfigurationError(
                f"test example {ex.id} has relation {ex.gold_label} absent from the stream"
            )
        tasks[t].test.append(ex)

    realized = sum(e.is_corrupted for e in dataset) / len(dataset)
    return TaskStream(
        tasks=tasks,
        relation_to_task=relation_to_task,
        n_tasks=n_tasks,
        noise_rate=realized if noise_rate is None else noise_rate,
        ood_pool=ood_pool,
        seeds=dict(seeds or {}),
    )


def noise_type(example: Example, task_index: int, stream: TaskStream) -> str:
    """Classify an example at its task as clean, closed-set or open-set.

    Closed-set corruption has its gold relation in an already-seen task;
    gold relations from future tasks, or absent from the stream entirely,
    are open-set.
    """
    if example.id not in stream.train_ids(task_index):
        raise StreamLookupError(
            f"example {example.id} is not in task {task_index} of this stream"
        )
    if not example.is_corrupted:
        return CLEAN
    gold_task = stream.relation_to_task.get(example.gold_label)
    if gold_task is not None and gold_task <= task_index:
        return CLOSED_SET
    return OPEN_SET


# ---------------------------------------------------------------------------
# Stream assembly and audit manifest
# ---------------------------------------------------------------------------


def build_stream(
    train_examples: list[Example],
    test_examples: list[Example],
    noise: NoiseSpec,
    n_tasks: int,
    partition_seed: int,
    ood_pool: list[Example] | None = None,
) -> TaskStream:
    """Corrupt the training set, then partition both splits into tasks."""
    corrupted = inject_noise(train_examples, noise, ood_pool=ood_pool)
    return partition_tasks(
        corrupted,
        n_tasks,
        partition_seed,
        test_dataset=test_examples,
        noise_rate=noise.rate,
        ood_pool=ood_pool,
        seeds={"noise": noise.seed, "partition": partition_seed},
    )


def synthetic_stream(
    n_relations: int,
    train_per_relation: int,
    test_per_relation: int,
    input_dim: int,
    separation: float,
    n_tasks: int,
    noise: NoiseSpec,
    seed: int,
) -> TaskStream:
    """Generate, split, corrupt and partition a synthetic stream.

    The test split is carved out per relation before corruption, so test
    labels are always clean.  For the global-ood protocol a disjoint pool
    is generated from a derived seed.
    """
    per_relation = train_per_relation + test_per_relation
    data = generate_synthetic(n_relations, per_relation, input_dim, separation, seed)
    train, test = [], []
    for r in range(n_relations):
        block = data[r * per_relation : (r + 1) * per_relation]
        train.extend(block[:train_per_relation])
        test.extend(block[train_per_relation:])

    ood_pool = None
    if noise.protocol == "global-ood":
        need = corruption_count(noise.rate, len(train))
        pool_per_relation = max(2, -(-need // n_relations) + 1)
        pool_seed = int(np.random.SeedSequence([seed, 7]).generate_state(1)[0])
        ood_pool = generate_synthetic(
            n_relations,
            pool_per_relation,
            input_dim,
            separation,
            pool_seed,
            relation_base=n_relations,
            id_base=len(data),
        )
    stream = build_stream(train, test, noise, n_tasks, partition_seed=seed, ood_pool=ood_pool)
    stream.seeds["data"] = seed
    return stream


def write_stream_manifest(stream: TaskStream, path) -> None:
    """Serialize seeds, assignments and corruption flags for audit."""
    doc = {
        "n_tasks": stream.n_tasks,
        "noise_rate": stream.noise_rate,
        "seeds": stream.seeds,
        "relation_to_task": {str(r): t for r, t in sorted(stream.relation_to_task.items())},
        "tasks": [
            {
                "index": t.index,
                "relations": list(t.relations),
                "train": [
                    [e.id, e.gold_label, e.observed_label, int(e.is_corrupted)]
                    for e in t.train
                ],
                "test": [[e.id, e.gold_label] for e in t.test],
            }
            for t in stream.tasks
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_stream_manifest(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
