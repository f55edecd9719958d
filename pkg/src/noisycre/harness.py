"""End-to-end driver: task loop, baseline methods and run metrics.

One run walks the task stream in order.  For the memory-based methods
each task goes through selection, (optionally) attack, contrastive
training, buffer update, replay and prototype refresh; the finetune and
joint baselines train a plain classifier instead.  After every task the
model is evaluated on the clean test sets of all tasks seen so far,
filling the lower-triangular accuracy matrix from which last accuracy
and normalized forgetting derive.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import attack as attack_mod
from . import contrastive, datastream, denoise, memory, models
from .errors import ConfigurationError, IntegrityError, PhaseError, StateError

METHODS = ("nacl", "discard", "noise-retain", "finetune", "joint")
MEMORY_METHODS = ("nacl", "discard", "noise-retain")

# Temperature defaults keyed by configured noise rate; unlisted rates use
# the nearest listed one.
TAU_BY_RATE = {0.1: 0.1, 0.3: 0.05, 0.5: 0.2}

_PHASE_SELECTION = "selection"
_PHASE_ATTACK = "attack"
_PHASE_TRAIN = "train"
_PHASE_BUFFER = "buffer"
_PHASE_REPLAY = "replay"
_PHASE_PROTOTYPES = "prototypes"


@dataclass(frozen=True)
class RunConfig:
    # stream source
    source: str = "synthetic"
    n_relations: int = 80
    train_per_relation: int = 100
    test_per_relation: int = 20
    input_dim: int = 16
    separation: float = 6.0
    data_seed: int = 0
    jsonl_path: str | None = None
    test_fraction: float = 0.2
    # label corruption
    noise_rate: float = 0.3
    noise_protocol: str = "uniform-flip"
    noise_seed: int = 1
    # task layout
    n_tasks: int = 10
    # model dimensions (auxiliary defaults to the main encoder's sizes)
    embed_dim: int = 16
    hidden_dim: int = 32
    encoder_dim: int = 32
    proj_dim: int = 64
    normalize: bool = True
    aux_hidden_dim: int | None = None
    aux_encoder_dim: int | None = None
    # selection
    gamma: float | None = None
    aux_epochs: int = 3
    # contrastive training
    main_epochs: int = 1
    batch_size: int = 16
    tau: float | None = None
    lr: float | None = None
    lr_aux: float | None = None
    # attack
    epsilon: float = 0.1
    attack_steps: int = 5
    lam: float = 0.1
    attack_step_size: float | None = None
    # memory
    capacity: int = 20
    literal_first_task_gate: bool = False
    # classifier baselines
    ce_epochs: int = 3
    # method and seeding
    method: str = "nacl"
    seed: int = 0
    dump_embeddings: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def resolved_gamma(self) -> float:
        return denoise.default_gamma(self.noise_rate) if self.gamma is None else self.gamma

    def resolved_tau(self) -> float:
        if self.tau is not None:
            return self.tau
        nearest = min(TAU_BY_RATE, key=lambda r: abs(r - self.noise_rate))
        return TAU_BY_RATE[nearest]

    def resolved_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        # Desk-scale encoders train at 1e-3; the pretrained-regime default
        # only applies to token inputs.
        return 1e-5 if self.source == "jsonl" else 1e-3

    def resolved_lr_aux(self) -> float:
        return self.resolved_lr() if self.lr_aux is None else self.lr_aux


def standard_fixture(
    noise_rate: float = 0.3,
    seed: int = 0,
    method: str = "nacl",
    noise_protocol: str = "uniform-flip",
    **overrides,
) -> RunConfig:
    """The compact 5-task synthetic benchmark used across the test suite.

    Data layout: 5 tasks x 4 relations x (200 train + 50 test) per
    relation, 16-dim inputs, separation 6.  The model/optimizer knobs are
    pinned where the method differences are visible at this scale: a
    deliberately mid-capacity selection model (precision stays near 0.99
    while recall sits near 0.94, so the attack has real samples to
    recover) and a main learning rate high enough that negative-sample
    richness matters across tasks.
    """
    base = dict(
        n_relations=20,
        train_per_relation=200,
        test_per_relation=50,
        input_dim=16,
        separation=6.0,
        n_tasks=5,
        noise_rate=noise_rate,
        noise_protocol=noise_protocol,
        data_seed=seed,
        noise_seed=seed + 1,
        method=method,
        seed=seed,
        hidden_dim=32,
        encoder_dim=32,
        lr=3e-3,
        aux_hidden_dim=64,
        aux_encoder_dim=8,
        lr_aux=5e-4,
    )
    base.update(overrides)
    return RunConfig(**base)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class TaskRecord:
    task_index: int
    relations: list[int]
    n_train: int = 0
    n_test: int = 0
    n_clean: int = 0
    n_noisy: int = 0
    n_att_pos: int = 0
    n_neg: int = 0
    selection_precision: float | None = None
    selection_recall: float | None = None
    confidences_true_clean: list[float] = field(default_factory=list)
    confidences_true_noisy: list[float] = field(default_factory=list)
    asr: float | None = None
    ball_violation: float | None = None
    target_prob_start: float | None = None
    target_prob_end: float | None = None
    train_losses: list[list] = field(default_factory=list)
    replay_losses: list[list] = field(default_factory=list)
    buffer_purity: float | None = None
    buffer_size: int = 0
    phase_sequence: list[str] = field(default_factory=list)
    wall_clock: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data.pop("wall_clock")
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TaskRecord":
        return cls(**data)


@dataclass
class RunReport:
    method: str
    seed: int
    config: dict
    accuracy_matrix: list[list[float]]
    test_sizes: list[int]
    last_accuracy: float
    normalized_forgetting: float | None
    tasks: list[TaskRecord]
    eval_hygiene: bool = True
    embedding_2d: list | None = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "config": self.config,
            "accuracy_matrix": self.accuracy_matrix,
            "test_sizes": self.test_sizes,
            "last_accuracy": self.last_accuracy,
            "normalized_forgetting": self.normalized_forgetting,
            "tasks": [t.to_dict() for t in self.tasks],
            "eval_hygiene": self.eval_hygiene,
            "embedding_2d": self.embedding_2d,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        data = dict(data)
        data["tasks"] = [TaskRecord.from_dict(t) for t in data["tasks"]]
        return cls(**data)


def last_accuracy(report: RunReport) -> float:
    """Accuracy over the union of all test sets at the final task:
    the example-weighted mean of the final matrix row."""
    if not report.accuracy_matrix or len(report.accuracy_matrix[-1]) != len(report.test_sizes):
        raise StateError("accuracy matrix is incomplete")
    row = report.accuracy_matrix[-1]
    sizes = report.test_sizes
    total = sum(sizes)
    return float(sum(a * n for a, n in zip(row, sizes)) / total)


def normalized_forgetting(acc_matrix) -> float | None:
    """Relative drop of first-task accuracy from task 1 to the last task;
    undefined (None) when the initial accuracy is zero."""
    first = acc_matrix[0][0]
    if first == 0:
        return None
    return abs(acc_matrix[-1][0] - first) / first


def buffer_purity(buffer: memory.MemoryBuffer, corrupted_flags: dict) -> float | None:
    """Fraction of stored exemplars whose observed label is the gold one."""
    exemplars = buffer.exemplars()
    if not exemplars:
        return None
    clean = sum(not corrupted_flags[ex.id] for ex in exemplars)
    return clean / len(exemplars)


# ---------------------------------------------------------------------------
# Run state and phases
# ---------------------------------------------------------------------------


@dataclass
class RunState:
    stream: datastream.TaskStream
    config: RunConfig
    encoder_config: models.EncoderConfig
    aux_encoder_config: models.EncoderConfig | None = None
    main: models.ModelState | None = None
    classifier: models.ModelState | None = None
    seen_relations: list[int] = field(default_factory=list)
    buffer: memory.MemoryBuffer = field(default_factory=memory.MemoryBuffer)
    prototypes: memory.PrototypeSet | None = None
    corrupted_flags: dict[int, bool] = field(default_factory=dict)
    records: list[TaskRecord] = field(default_factory=list)


def _seed_for(base: int, *path) -> int:
    return int(np.random.SeedSequence([base, *path]).generate_state(1)[0])


def build_stream_from_config(config: RunConfig) -> datastream.TaskStream:
    noise = datastream.NoiseSpec(
        rate=config.noise_rate, protocol=config.noise_protocol, seed=config.noise_seed
    )
    if config.source == "synthetic":
        return datastream.synthetic_stream(
            n_relations=config.n_relations,
            train_per_relation=config.train_per_relation,
            test_per_relation=config.test_per_relation,
            input_dim=config.input_dim,
            separation=config.separation,
            n_tasks=config.n_tasks,
            noise=noise,
            seed=config.data_seed,
        )
    if config.source == "jsonl":
        if not config.jsonl_path:
            raise ConfigurationError("jsonl source requires jsonl_path")
        corpus = datastream.ingest_jsonl(config.jsonl_path)
        rng = np.random.default_rng(config.data_seed)
        by_relation: dict[int, list] = {}
        for ex in corpus.examples:
            by_relation.setdefault(ex.gold_label, []).append(ex)
        train, test = [], []
        for r in sorted(by_relation):
            group = by_relation[r]
            order = rng.permutation(len(group))
            n_test = max(1, int(round(config.test_fraction * len(group))))
            test.extend(group[i] for i in order[:n_test])
            train.extend(group[i] for i in order[n_test:])
        return datastream.build_stream(train, test, noise, config.n_tasks, config.data_seed)
    raise ConfigurationError(f"unknown stream source {config.source!r}")


def _encoder_config(
    config: RunConfig, stream: datastream.TaskStream, role: str = models.MAIN
) -> models.EncoderConfig:
    hidden = config.hidden_dim
    out = config.encoder_dim
    if role == models.AUXILIARY:
        hidden = config.aux_hidden_dim if config.aux_hidden_dim is not None else hidden
        out = config.aux_encoder_dim if config.aux_encoder_dim is not None else out
    sample = stream.tasks[0].train[0].input
    if sample.kind == datastream.VECTOR:
        return models.EncoderConfig(
            kind=models.VECTOR,
            embed_dim=len(sample.vector),
            hidden_dim=hidden,
            out_dim=out,
        )
    vocab = 0
    for task in stream.tasks:
        for ex in task.train + task.test:
            vocab = max(vocab, max(ex.input.tokens) + 1)
    return models.EncoderConfig(
        kind=models.TOKENS,
        embed_dim=config.embed_dim,
        hidden_dim=hidden,
        out_dim=out,
        vocab_size=vocab,
    )


def _phase(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except PhaseError:
                raise
            except Exception as exc:
                raise PhaseError(name, str(exc)) from exc

        return inner

    return wrap


@_phase(_PHASE_SELECTION)
def _run_selection(state: RunState, task, config: RunConfig, record: TaskRecord):
    seed = _seed_for(config.seed, task.index, 0)
    aux = denoise.train_auxiliary(
        task.train,
        task.relations,
        state.aux_encoder_config,
        denoise.SelectionConfig(
            gamma=config.resolved_gamma(),
            aux_epochs=config.aux_epochs,
            batch_size=config.batch_size,
        ),
        seed=seed,
        lr=config.resolved_lr_aux(),
    )
    selection = denoise.select_clean(aux, task.train, task.relations, config.resolved_gamma())
    flags = {e.id: e.is_corrupted for e in task.train}
    quality = denoise.selection_quality(selection, flags)
    record.n_clean = len(selection.clean)
    record.n_noisy = len(selection.noisy)
    record.selection_precision = quality.precision
    record.selection_recall = quality.recall
    for ex in sorted(task.train, key=lambda e: e.id):
        conf = selection.confidences[ex.id]
        if ex.is_corrupted:
            record.confidences_true_noisy.append(conf)
        else:
            record.confidences_true_clean.append(conf)
    return aux, selection


@_phase(_PHASE_ATTACK)
def _run_attack(state: RunState, task, config: RunConfig, aux, selection, record: TaskRecord):
    by_id = {e.id: e for e in task.train}
    clean_examples = [by_id[i] for i in sorted(selection.clean)]
    noisy_examples = [by_id[i] for i in sorted(selection.noisy)]

    if config.method == "discard" or not noisy_examples:
        return attack_mod.ContrastivePool(
            clean=selection.clean, att_pos=frozenset(), neg=frozenset(), perturbed_inputs={}
        )
    if config.method == "noise-retain":
        originals = {
            e.id: models.embed_input(state.main, e.input) for e in noisy_examples
        }
        return attack_mod.ContrastivePool(
            clean=selection.clean,
            att_pos=frozenset(),
            neg=selection.noisy,
            perturbed_inputs=originals,
        )

    attack_config = attack_mod.AttackConfig(
        epsilon=config.epsilon,
        steps=config.attack_steps,
        lam=config.lam,
        step_size=config.attack_step_size,
        seed=_seed_for(config.seed, task.index, 1),
    )
    stats = attack_mod.centroid_stats(state.main, clean_examples)
    outcome = attack_mod.attack_noisy_set(aux, noisy_examples, task.relations, attack_config)
    asr, flags = attack_mod.attack_success_rate(
        state.main, outcome.perturbed, stats, noisy_examples
    )
    record.asr = asr
    record.ball_violation = outcome.ball_violation
    record.target_prob_start = outcome.target_prob_start
    record.target_prob_end = outcome.target_prob_end
    pool = attack_mod.build_pool(selection, flags, outcome.perturbed)
    record.n_att_pos = len(pool.att_pos)
    record.n_neg = len(pool.neg)
    return pool


def _pool_roles(pool) -> dict[int, int]:
    roles = {i: contrastive.ROLE_CLEAN for i in pool.clean}
    roles.update({i: contrastive.ROLE_ATT_POS for i in pool.att_pos})
    roles.update({i: contrastive.ROLE_NEG for i in pool.neg})
    return roles


@_phase(_PHASE_TRAIN)
def _run_train(state: RunState, task, config: RunConfig, pool, record: TaskRecord):
    by_id = {e.id: e for e in task.train}
    roles = _pool_roles(pool)
    tau = config.resolved_tau()
    lr = config.resolved_lr()
    trainable_embed = state.encoder_config.kind == models.TOKENS
    for epoch in range(config.main_epochs):
        plans = contrastive.make_batches(
            pool, config.batch_size, _seed_for(config.seed, task.index, 2, epoch)
        )
        losses = []
        skipped = 0
        for plan in plans:
            anchors = [by_id[i] for i in plan.anchor_ids]
            member_ids = list(plan.anchor_ids) + list(plan.companion_ids)
            embedded = [models.embed_input(state.main, e.input) for e in anchors]
            embedded += [pool.perturbed_inputs[i] for i in plan.companion_ids]
            X = models.pool_batch(embedded)
            tape = models.forward_main_batch(state.main, X)
            batch = contrastive.ContrastBatch(
                z=tape.Z,
                labels=np.array([by_id[i].observed_label for i in member_ids]),
                roles=np.array([roles[i] for i in member_ids]),
                anchor_mask=np.array(
                    [True] * len(plan.anchor_ids) + [False] * len(plan.companion_ids)
                ),
                temperature=tau,
            )
            result = contrastive.nacl_loss(batch)
            skipped += result.n_skipped
            if result.loss is None:
                continue
            losses.append(result.loss)
            grads, dX = models.backward_main(
                state.main, tape, d_z=result.dz, need_input_grad=trainable_embed
            )
            if trainable_embed:
                # Only re-embedded anchors feed the embedding table.
                models.accumulate_embed_grads(
                    state.main, anchors, dX, grads, rows=range(len(anchors))
                )
            models.optimizer_step(state.main, grads, lr)
        mean_loss = float(np.mean(losses)) if losses else None
        record.train_losses.append([epoch, mean_loss, skipped])


@_phase(_PHASE_BUFFER)
def _run_buffer(state: RunState, task, config: RunConfig, selection, record: TaskRecord):
    if config.literal_first_task_gate and task.index == 0:
        return
    by_id = {e.id: e for e in task.train}
    clean_examples = [by_id[i] for i in sorted(selection.clean)]
    memory.update_buffer(
        state.buffer,
        clean_examples,
        task.relations,
        state.main,
        _seed_for(config.seed, task.index, 3),
    )
    record.buffer_purity = buffer_purity(state.buffer, state.corrupted_flags)
    record.buffer_size = len(state.buffer)


@_phase(_PHASE_REPLAY)
def _run_replay(state: RunState, task, config: RunConfig, record: TaskRecord):
    exemplars = state.buffer.exemplars()
    if not exemplars:
        return
    tau = config.resolved_tau()
    lr = config.resolved_lr()
    trainable_embed = state.encoder_config.kind == models.TOKENS
    for epoch in range(config.main_epochs):
        rng = np.random.default_rng(_seed_for(config.seed, task.index, 4, epoch))
        order = rng.permutation(len(exemplars))
        losses = []
        skipped = 0
        for start in range(0, len(exemplars), config.batch_size):
            batch_examples = [exemplars[i] for i in order[start : start + config.batch_size]]
            X = models.pooled_inputs(state.main, batch_examples)
            tape = models.forward_main_batch(state.main, X)
            labels = np.array([e.observed_label for e in batch_examples])
            result = contrastive.scl_loss(tape.Z, labels, tau)
            skipped += result.n_skipped
            if result.loss is None:
                continue
            losses.append(result.loss)
            grads, dX = models.backward_main(
                state.main, tape, d_z=result.dz, need_input_grad=trainable_embed
            )
            if trainable_embed:
                models.accumulate_embed_grads(state.main, batch_examples, dX, grads)
            models.optimizer_step(state.main, grads, lr)
        mean_loss = float(np.mean(losses)) if losses else None
        record.replay_losses.append([epoch, mean_loss, skipped])


@_phase(_PHASE_PROTOTYPES)
def _run_prototypes(state: RunState):
    state.prototypes = memory.compute_prototypes(state.buffer, state.main)


def _expand_classifier(state: RunState, new_relations, seed: int) -> None:
    """Grow the finetune head to cover the new task's relations, keeping
    encoder weights and the columns of already-seen relations."""
    old = state.classifier
    n_old = len(state.seen_relations)
    state.seen_relations.extend(sorted(new_relations))
    fresh = models.init_model(
        models.AUXILIARY,
        state.encoder_config,
        seed=seed,
        n_classes=len(state.seen_relations),
    )
    if old is not None:
        for name in old.slices:
            if name in ("cls_w", "cls_b"):
                continue
            fresh.get(name)[...] = old.get(name)
        fresh.get("cls_w")[:, :n_old] = old.get("cls_w")
        fresh.get("cls_b")[:n_old] = old.get("cls_b")
    state.classifier = fresh


def _train_ce(state: RunState, examples, relation_order, config: RunConfig, seed: int):
    """Cross-entropy epochs for the classifier baselines."""
    model = state.classifier
    index = {r: i for i, r in enumerate(relation_order)}
    y = np.array([index[e.observed_label] for e in examples], dtype=np.intp)
    rng = np.random.default_rng(seed)
    lr = config.resolved_lr()
    trainable_embed = state.encoder_config.kind == models.TOKENS
    for _ in range(config.ce_epochs):
        order = rng.permutation(len(examples))
        for start in range(0, len(examples), config.batch_size):
            rows = order[start : start + config.batch_size]
            batch_examples = [examples[i] for i in rows]
            X = models.pooled_inputs(model, batch_examples)
            if trainable_embed:
                _, grads, dX = denoise.aux_ce_loss(model, X, y[rows], need_input_grad=True)
                models.accumulate_embed_grads(model, batch_examples, dX, grads)
            else:
                _, grads = denoise.aux_ce_loss(model, X, y[rows])
            models.optimizer_step(model, grads, lr)


def run_task(state: RunState, task_index: int, config: RunConfig) -> TaskRecord:
    """Execute one task of the configured method and append its record."""
    task = state.stream.tasks[task_index]
    record = TaskRecord(
        task_index=task_index,
        relations=list(task.relations),
        n_train=len(task.train),
        n_test=len(task.test),
    )
    started = time.perf_counter()

    if config.method in MEMORY_METHODS:
        aux, selection = _run_selection(state, task, config, record)
        record.phase_sequence.append(_PHASE_SELECTION)
        pool = _run_attack(state, task, config, aux, selection, record)
        record.phase_sequence.append(_PHASE_ATTACK)
        _run_train(state, task, config, pool, record)
        record.phase_sequence.append(_PHASE_TRAIN)
        _run_buffer(state, task, config, selection, record)
        record.phase_sequence.append(_PHASE_BUFFER)
        if task_index > 0:
            _run_replay(state, task, config, record)
            record.phase_sequence.append(_PHASE_REPLAY)
        _run_prototypes(state)
        record.phase_sequence.append(_PHASE_PROTOTYPES)
    elif config.method == "finetune":
        try:
            _expand_classifier(state, task.relations, _seed_for(config.seed, task_index, 5))
            _train_ce(state, task.train, state.seen_relations, config,
                      _seed_for(config.seed, task_index, 6))
        except Exception as exc:
            raise PhaseError(_PHASE_TRAIN, str(exc)) from exc
        record.phase_sequence.append(_PHASE_TRAIN)
    elif config.method == "joint":
        try:
            relations = sorted(
                r for t in state.stream.tasks[: task_index + 1] for r in t.relations
            )
            state.seen_relations = relations
            state.classifier = models.init_model(
                models.AUXILIARY,
                state.encoder_config,
                seed=_seed_for(config.seed, task_index, 5),
                n_classes=len(relations),
            )
            pooled = [e for t in state.stream.tasks[: task_index + 1] for e in t.train]
            _train_ce(state, pooled, relations, config, _seed_for(config.seed, task_index, 6))
        except Exception as exc:
            raise PhaseError(_PHASE_TRAIN, str(exc)) from exc
        record.phase_sequence.append(_PHASE_TRAIN)
    else:
        raise ConfigurationError(f"unknown method {config.method!r}")

    record.wall_clock = time.perf_counter() - started
    state.records.append(record)
    return record


# ---------------------------------------------------------------------------
# Evaluation and full runs
# ---------------------------------------------------------------------------


def _evaluate_task(state: RunState, config: RunConfig, test_examples) -> float:
    if not test_examples:
        return 0.0
    gold = np.array([e.gold_label for e in test_examples])
    if config.method in MEMORY_METHODS:
        if state.prototypes is None or memory.is_stale(state.prototypes, state.main):
            state.prototypes = memory.compute_prototypes(state.buffer, state.main)
        if not state.prototypes.prototypes:
            # No stored relations yet (literal first-task gate): nothing is
            # predictable.
            return 0.0
        Z = models.projected_batch(state.main, test_examples)
        preds = memory.ncm_predict_batch(Z, state.prototypes)
    else:
        X = models.pooled_inputs(state.classifier, test_examples)
        tape = models.forward_aux_batch(state.classifier, X)
        rel = np.array(state.seen_relations)
        preds = rel[tape.logits.argmax(axis=1)]
    return float((preds == gold).mean())


def run_stream(config: RunConfig, out_dir=None) -> RunReport:
    """Run every task of the stream and assemble the report.

    ``out_dir`` (optional) receives per-task audit files and, on a phase
    failure, a checkpoint of the partial state before the error is
    re-raised.
    """
    if config.method not in METHODS:
        raise ConfigurationError(f"unknown method {config.method!r}")
    stream = build_stream_from_config(config)
    encoder_config = _encoder_config(config, stream)
    state = RunState(
        stream=stream,
        config=config,
        encoder_config=encoder_config,
        aux_encoder_config=_encoder_config(config, stream, role=models.AUXILIARY),
    )
    for task in stream.tasks:
        for ex in task.train:
            state.corrupted_flags[ex.id] = ex.is_corrupted

    train_ids = {e.id for t in stream.tasks for e in t.train}
    test_ids = {e.id for t in stream.tasks for e in t.test}
    if train_ids & test_ids:
        raise IntegrityError("test examples overlap the training stream")

    if config.method in MEMORY_METHODS:
        state.main = models.init_model(
            models.MAIN,
            encoder_config,
            seed=_seed_for(config.seed, 999),
            proj_dim=config.proj_dim,
            normalize=config.normalize,
        )
        state.buffer = memory.MemoryBuffer(capacity=config.capacity)

    out_path = None
    if out_dir is not None:
        from pathlib import Path

        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)

    matrix: list[list[float]] = []
    for k in range(stream.n_tasks):
        try:
            run_task(state, k, config)
        except PhaseError:
            if out_path is not None:
                model = state.main if state.main is not None else state.classifier
                if model is not None:
                    models.save_checkpoint(model, out_path / f"partial_task{k}.npz")
            raise
        matrix.append([_evaluate_task(state, config, stream.tasks[j].test) for j in range(k + 1)])
        if out_path is not None and config.method in MEMORY_METHODS:
            memory.write_buffer_manifest(
                state.buffer, out_path / f"buffer_task{k}.json", state.corrupted_flags
            )

    report = RunReport(
        method=config.method,
        seed=config.seed,
        config=config.to_dict(),
        accuracy_matrix=matrix,
        test_sizes=[len(t.test) for t in stream.tasks],
        last_accuracy=0.0,
        normalized_forgetting=normalized_forgetting(matrix),
        tasks=state.records,
    )
    report.last_accuracy = last_accuracy(report)
    if config.dump_embeddings:
        report.embedding_2d = _embedding_dump(state, config)
    return report


def _embedding_dump(state: RunState, config: RunConfig, max_points: int = 500) -> list:
    """2-D principal-component projection of final test features."""
    tests = [e for t in state.stream.tasks for e in t.test]
    tests = tests[:max_points]
    if config.method in MEMORY_METHODS:
        Z = models.projected_batch(state.main, tests)
    else:
        Z = models.hidden_batch(state.classifier, tests)
    centered = Z - Z.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    coords = centered @ vt[:2].T
    return [
        [ex.id, ex.gold_label, float(x), float(y)]
        for ex, (x, y) in zip(tests, coords)
    ]


def ablate(config: RunConfig, methods, seeds) -> dict:
    """Run a method sweep and summarize per-method medians."""
    results: dict[str, list[RunReport]] = {}
    for method in methods:
        if method not in METHODS:
            raise ConfigurationError(f"unknown method {method!r}")
        reports = []
        for seed in seeds:
            run_cfg = dataclasses.replace(
                config, method=method, seed=seed, data_seed=seed, noise_seed=seed + 1
            )
            reports.append(run_stream(run_cfg))
        results[method] = reports
    summary = {
        method: {
            "median_last_accuracy": float(np.median([r.last_accuracy for r in reports])),
            "median_forgetting": _median_or_none(
                [r.normalized_forgetting for r in reports]
            ),
            "seeds": list(seeds),
        }
        for method, reports in results.items()
    }
    return {"reports": results, "summary": summary}


def _median_or_none(values):
    defined = [v for v in values if v is not None]
    return float(np.median(defined)) if defined else None
