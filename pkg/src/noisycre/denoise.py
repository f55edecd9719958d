"""Rebooted selection of clean samples.

A freshly initialized auxiliary model is trained on the current task with
plain cross-entropy against the observed (possibly corrupted) labels, and
the task is split into pseudo-clean / pseudo-noisy halves by thresholding
the confidence the classifier assigns to each observed label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import models
from .errors import ConfigurationError, IntegrityError

# Threshold defaults keyed by configured noise rate; a clean run has
# nothing to filter.
GAMMA_BY_RATE = {0.1: 0.8, 0.3: 0.6, 0.5: 0.5}


def default_gamma(noise_rate: float) -> float:
    if noise_rate == 0.0:
        return 0.0
    nearest = min(GAMMA_BY_RATE, key=lambda r: abs(r - noise_rate))
    return GAMMA_BY_RATE[nearest]


@dataclass(frozen=True)
class SelectionConfig:
    gamma: float = 0.6
    aux_epochs: int = 3
    batch_size: int = 16

    def validate(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.aux_epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("aux_epochs and batch_size must be >= 1")


@dataclass
class SelectionResult:
    clean: frozenset
    noisy: frozenset
    confidences: dict[int, float]


@dataclass
class SelectionQuality:
    precision: float | None
    recall: float | None


def local_labels(examples, relations) -> np.ndarray:
    """Map observed relation ids to task-local class indices."""
    index = {r: i for i, r in enumerate(relations)}
    try:
        return np.array([index[e.observed_label] for e in examples], dtype=np.intp)
    except KeyError as exc:
        raise IntegrityError(
            f"observed label {exc.args[0]} outside the task relation set"
        ) from exc


def aux_ce_loss(model, X, y, need_input_grad=False):
    """Mean cross-entropy of the observed classes over a pooled batch.

    Returns (loss, flat parameter gradients) and appends the pooled-input
    gradient when requested.
    """
    tape = models.forward_aux_batch(model, X)
    n = len(y)
    lse = tape.logits.max(axis=1) + np.log(
        np.exp(tape.logits - tape.logits.max(axis=1, keepdims=True)).sum(axis=1)
    )
    loss = float((lse - tape.logits[np.arange(n), y]).mean())
    d_logits = tape.probs.copy()
    d_logits[np.arange(n), y] -= 1.0
    d_logits /= n
    grads, dX = models.backward_aux(model, tape, d_logits, need_input_grad=need_input_grad)
    if need_input_grad:
        return loss, grads, dX
    return loss, grads


def train_auxiliary(
    examples,
    relations,
    model_config: models.EncoderConfig,
    cfg: SelectionConfig,
    seed: int,
    lr: float = 1e-3,
    init_from: models.ModelState | None = None,
) -> models.ModelState:
    """Train the task-local classifier for selection.

    By default the model is rebooted: freshly initialized from ``seed`` so
    earlier tasks cannot leak into its confidences.  ``init_from`` warm
    starts from an existing model instead, which exists only to measure
    how much the reboot buys.
    """
    cfg.validate()
    if not examples:
        raise ConfigurationError("cannot train on an empty task dataset")
    if init_from is None:
        model = models.init_model(
            models.AUXILIARY, model_config, seed=seed, n_classes=len(relations)
        )
    else:
        if init_from.n_classes != len(relations):
            raise ConfigurationError("warm start requires a matching class count")
        model = init_from
    y = local_labels(examples, relations)
    rng = np.random.default_rng(seed)
    n = len(examples)
    trainable_embed = model.config.kind == models.TOKENS
    for _ in range(cfg.aux_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            batch_examples = [examples[i] for i in batch]
            X = models.pooled_inputs(model, batch_examples)
            if trainable_embed:
                # The pooled-input gradient feeds the embedding table.
                _, grads, dX = aux_ce_loss(model, X, y[batch], need_input_grad=True)
                models.accumulate_embed_grads(model, batch_examples, dX, grads)
            else:
                _, grads = aux_ce_loss(model, X, y[batch])
            models.optimizer_step(model, grads, lr)
    return model


def select_clean(model, examples, relations, gamma, mode="observed") -> SelectionResult:
    """Partition a task by confidence threshold.

    Confidence is the softmax probability of the observed label
    (``mode="observed"``); ``mode="max"`` scores the most likely class
    instead and is kept for comparison.  Examples with confidence >= gamma
    form the pseudo-clean set.
    """
    if mode not in ("observed", "max"):
        raise ConfigurationError(f"unknown confidence mode {mode!r}")
    y = local_labels(examples, relations)
    X = models.pooled_inputs(model, examples)
    tape = models.forward_aux_batch(model, X)
    if mode == "observed":
        conf = tape.probs[np.arange(len(examples)), y]
    else:
        conf = tape.probs.max(axis=1)
    confidences = {ex.id: float(c) for ex, c in zip(examples, conf)}
    clean = frozenset(ex.id for ex, c in zip(examples, conf) if c >= gamma)
    noisy = frozenset(ex.id for ex in examples if ex.id not in clean)
    return SelectionResult(clean=clean, noisy=noisy, confidences=confidences)


def selection_quality(result: SelectionResult, corrupted_flags: dict[int, bool]) -> SelectionQuality:
    """Precision/recall of the pseudo-clean set against ground-truth flags.

    Precision is reported as None (undefined) when nothing was selected.
    """
    truly_clean = {i for i, corrupted in corrupted_flags.items() if not corrupted}
    selected = result.clean
    hit = len(selected & truly_clean)
    precision = hit / len(selected) if selected else None
    recall = hit / len(truly_clean) if truly_clean else None
    return SelectionQuality(precision=precision, recall=recall)


def confidence_separation(result: SelectionResult, corrupted_flags: dict[int, bool]) -> float:
    """Mean confidence of truly-clean minus truly-noisy examples."""
    clean = [c for i, c in result.confidences.items() if not corrupted_flags[i]]
    noisy = [c for i, c in result.confidences.items() if corrupted_flags[i]]
    if not clean or not noisy:
        raise ConfigurationError("separation needs both populations")
    return float(np.mean(clean) - np.mean(noisy))


def reboot_separation_diagnostic(stream, model_config, cfg: SelectionConfig, seed: int, lr: float):
    """Clean/noisy confidence separation at the final task, trained two
    ways: rebooted per task versus warm-started from the previous task's
    model.  Returns (rebooted, warm_started)."""
    warm = None
    rebooted_sep = warm_sep = None
    for task in stream.tasks:
        flags = {e.id: e.is_corrupted for e in task.train}
        task_seed = int(np.random.SeedSequence([seed, task.index, 90]).generate_state(1)[0])
        fresh = train_auxiliary(task.train, task.relations, model_config, cfg, seed=task_seed, lr=lr)
        if warm is None:
            warm = fresh
        else:
            warm = train_auxiliary(
                task.train, task.relations, model_config, cfg,
                seed=task_seed, lr=lr, init_from=warm,
            )
        if task.index == stream.n_tasks - 1:
            sel_fresh = select_clean(fresh, task.train, task.relations, cfg.gamma)
            sel_warm = select_clean(warm, task.train, task.relations, cfg.gamma)
            rebooted_sep = confidence_separation(sel_fresh, flags)
            warm_sep = confidence_separation(sel_warm, flags)
    return rebooted_sep, warm_sep


def write_selection_audit(result: SelectionResult, path, corrupted_flags=None) -> None:
    """One audit row per example: id, confidence, assigned set, true flag."""
    rows = []
    for ex_id in sorted(result.confidences):
        row = {
            "id": ex_id,
            "confidence": result.confidences[ex_id],
            "set": "clean" if ex_id in result.clean else "noisy",
        }
        if corrupted_flags is not None:
            row["corrupted"] = bool(corrupted_flags[ex_id])
        rows.append(row)
    with open(path, "w") as fh:
        json.dump(rows, fh, sort_keys=True, indent=1)
        fh.write("\n")
