"""Small deterministic feedforward models with hand-written gradients.

Two roles share one encoder: the *main* model adds a two-layer projector
whose (optionally L2-normalized) output feeds the contrastive losses and
prototype inference; the *auxiliary* model adds a linear classifier head.
Parameters live in a single flat float64 vector addressed through named
slices, which keeps optimizer updates, checkpointing and finite-difference
verification trivial.

Forward passes are pure; training code threads explicit tapes from a
forward call into the matching backward call.  A tape is only valid for
the parameter revision it was recorded under.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .datastream import InputRep, TOKENS, VECTOR
from .errors import ConfigurationError, NumericalError, StateError, ValidationError

MAIN = "main"
AUXILIARY = "auxiliary"

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = VECTOR
    embed_dim: int = 16
    hidden_dim: int = 32
    out_dim: int = 32
    vocab_size: int = 0  # tokens kind only

    def validate(self):
        if self.kind not in (VECTOR, TOKENS):
            raise ConfigurationError(f"unknown input kind {self.kind!r}")
        for name in ("embed_dim", "hidden_dim", "out_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.kind == TOKENS and self.vocab_size < 1:
            raise ConfigurationError("tokens kind requires vocab_size >= 1")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ModelState:
    role: str
    config: EncoderConfig
    params: np.ndarray
    slices: dict[str, tuple[slice, tuple[int, ...]]]
    proj_dim: int = 0
    n_classes: int = 0
    normalize: bool = True
    revision: int = 0
    opt: AdamState | None = None

    def get(self, name: str) -> np.ndarray:
        sl, shape = self.slices[name]
        return self.params[sl].reshape(shape)

    @property
    def n_params(self) -> int:
        return self.params.size

    def slice_name_of(self, flat_index: int) -> str:
        for name, (sl, _) in self.slices.items():
            if sl.start <= flat_index < sl.stop:
                return name
        raise IndexError(flat_index)


def _layout(role: str, config: EncoderConfig, head_dim: int):
    shapes: dict[str, tuple[int, ...]] = {}
    if config.kind == TOKENS:
        shapes["embed"] = (config.vocab_size, config.embed_dim)
    shapes["enc_w1"] = (config.embed_dim, config.hidden_dim)
    shapes["enc_b1"] = (config.hidden_dim,)
    shapes["enc_w2"] = (config.hidden_dim, config.out_dim)
    shapes["enc_b2"] = (config.out_dim,)
    if role == MAIN:
        shapes["proj_w1"] = (config.out_dim, config.out_dim)
        shapes["proj_b1"] = (config.out_dim,)
        shapes["proj_w2"] = (config.out_dim, head_dim)
        shapes["proj_b2"] = (head_dim,)
    else:
        shapes["cls_w"] = (config.out_dim, head_dim)
        shapes["cls_b"] = (head_dim,)
    slices = {}
    offset = 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        slices[name] = (slice(offset, offset + size), shape)
        offset += size
    return slices, offset


# Fan-in of each slice, used for the symmetric uniform init bound.
def _fan_in(name: str, config: EncoderConfig) -> int:
    return {
        "embed": config.embed_dim,
        "enc_w1": config.embed_dim,
        "enc_b1": config.embed_dim,
        "enc_w2": config.hidden_dim,
        "enc_b2": config.hidden_dim,
        "proj_w1": config.out_dim,
        "proj_b1": config.out_dim,
        "proj_w2": config.out_dim,
        "proj_b2": config.out_dim,
        "cls_w": config.out_dim,
        "cls_b": config.out_dim,
    }[name]


def init_model(
    role: str,
    config: EncoderConfig,
    seed: int,
    proj_dim: int = 0,
    n_classes: int = 0,
    normalize: bool = True,
) -> ModelState:
    """Build a freshly initialized model; identical seeds give identical
    parameters, so re-calling this is the reboot primitive."""
    config.validate()
    if role == MAIN:
        if proj_dim < 1:
            raise ConfigurationError("main role requires proj_dim >= 1")
        head_dim = proj_dim
    elif role == AUXILIARY:
        if n_classes < 1:
            raise ConfigurationError("auxiliary role requires n_classes >= 1")
        head_dim = n_classes
    else:
        raise ConfigurationError(f"unknown role {role!r}")

    slices, n = _layout(role, config, head_dim)
    params = np.empty(n, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for name, (sl, shape) in slices.items():
        bound = 1.0 / np.sqrt(_fan_in(name, config))
        params[sl] = rng.uniform(-bound, bound, size=sl.stop - sl.start)
    model = ModelState(
        role=role,
        config=config,
        params=params,
        slices=slices,
        proj_dim=proj_dim,
        n_classes=n_classes,
        normalize=normalize,
    )
    model.opt = AdamState(m=np.zeros(n), v=np.zeros(n))
    return model


# ---------------------------------------------------------------------------
# Embedding and pooling
# ---------------------------------------------------------------------------


def embed_input(model: ModelState, rep: InputRep) -> np.ndarray:
    """Materialize the perturbable embedded form of one input.

    Vector inputs pass through unchanged; token inputs become an
    (L, embed_dim) matrix of embedding rows.
    """
    cfg = model.config
    if rep.kind != cfg.kind:
        raise ValidationError(f"input kind {rep.kind!r} != model kind {cfg.kind!r}")
    if rep.kind == VECTOR:
        vec = np.asarray(rep.vector, dtype=np.float64)
        if vec.shape != (cfg.embed_dim,):
            raise ValidationError(
                f"vector length {vec.shape} != configured dimension {cfg.embed_dim}"
            )
        return vec
    ids = np.asarray(rep.tokens, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValidationError(
            f"token id out of vocabulary (size {cfg.vocab_size}): {ids.max()}"
        )
    return model.get("embed")[ids].copy()


def pool_embedded(embedded: np.ndarray) -> np.ndarray:
    """An embedded input collapses to one row: identity for vectors,
    mean over tokens for matrices."""
    embedded = np.asarray(embedded, dtype=np.float64)
    return embedded if embedded.ndim == 1 else embedded.mean(axis=0)


def pool_batch(embedded_list) -> np.ndarray:
    return np.stack([pool_embedded(e) for e in embedded_list])


def unpool_grads(embedded_list, d_pooled: np.ndarray) -> list[np.ndarray]:
    """Distribute pooled-row gradients back to each embedded input."""
    out = []
    for emb, g in zip(embedded_list, d_pooled):
        if np.asarray(emb).ndim == 1:
            out.append(g.copy())
        else:
            out.append(np.tile(g / len(emb), (len(emb), 1)))
    return out


def embed_examples(model: ModelState, examples) -> list[np.ndarray]:
    return [embed_input(model, ex.input) for ex in examples]


def pooled_inputs(model: ModelState, examples) -> np.ndarray:
    """Pooled input rows for a batch of examples under the current
    embedding table."""
    return pool_batch(embed_examples(model, examples))


def accumulate_embed_grads(
    model: ModelState, examples, d_pooled: np.ndarray, grads: np.ndarray, rows=None
) -> None:
    """Scatter pooled-input gradients into the embedding-table slice.

    ``rows`` selects which batch rows correspond to trainable (re-embedded)
    examples; frozen embedded inputs contribute nothing here.
    """
    if model.config.kind != TOKENS:
        return
    sl, shape = model.slices["embed"]
    g_embed = grads[sl].reshape(shape)
    indices = range(len(examples)) if rows is None else rows
    for i, ex in zip(indices, examples):
        ids = np.asarray(ex.input.tokens, dtype=np.intp)
        np.add.at(g_embed, ids, d_pooled[i] / ids.size)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class MainTape:
    X: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    H: np.ndarray
    a2: np.ndarray
    h2: np.ndarray
    V: np.ndarray
    norms: np.ndarray
    Z: np.ndarray
    revision: int


@dataclass
class AuxTape:
    X: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    H: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    revision: int


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _encode_fwd(model, X):
    w1, b1 = model.get("enc_w1"), model.get("enc_b1")
    w2, b2 = model.get("enc_w2"), model.get("enc_b2")
    a1 = X @ w1 + b1
    h1 = np.maximum(a1, 0.0)
    H = h1 @ w2 + b2
    return a1, h1, H


def _encode_bwd(model, X, a1, h1, dH, grads, need_input_grad):
    sl_w1, _ = model.slices["enc_w1"]
    sl_b1, _ = model.slices["enc_b1"]
    sl_w2, _ = model.slices["enc_w2"]
    sl_b2, _ = model.slices["enc_b2"]
    grads[sl_w2] += (h1.T @ dH).ravel()
    grads[sl_b2] += dH.sum(axis=0)
    dh1 = dH @ model.get("enc_w2").T
    da1 = dh1 * (a1 > 0)
    grads[sl_w1] += (X.T @ da1).ravel()
    grads[sl_b1] += da1.sum(axis=0)
    if need_input_grad:
        return da1 @ model.get("enc_w1").T
    return None


def forward_main_batch(model: ModelState, X: np.ndarray) -> MainTape:
    if model.role != MAIN:
        raise StateError("forward_main requires a main-role model")
    a1, h1, H = _encode_fwd(model, X)
    p1, c1 = model.get("proj_w1"), model.get("proj_b1")
    p2, c2 = model.get("proj_w2"), model.get("proj_b2")
    a2 = H @ p1 + c1
    h2 = np.maximum(a2, 0.0)
    V = h2 @ p2 + c2
    norms = np.maximum(np.linalg.norm(V, axis=-1, keepdims=True), 1e-12)
    Z = V / norms if model.normalize else V.copy()
    return MainTape(X, a1, h1, H, a2, h2, V, norms, Z, model.revision)


def backward_main(
    model: ModelState,
    tape: MainTape,
    d_hidden: np.ndarray | None = None,
    d_z: np.ndarray | None = None,
    need_input_grad: bool = False,
):
    """Backpropagate through projector and encoder.

    Returns (flat parameter gradients, pooled-input gradients or None).
    Raises StateError when the tape predates a parameter update.
    """
    if tape is None or tape.revision != model.revision:
        raise StateError("backward requires a tape recorded by a current forward pass")
    grads = np.zeros_like(model.params)
    dH = np.zeros_like(tape.H)
    if d_hidden is not None:
        dH += d_hidden
    if d_z is not None:
        if model.normalize:
            inner = (tape.Z * d_z).sum(axis=-1, keepdims=True)
            dV = (d_z - inner * tape.Z) / tape.norms
        else:
            dV = d_z
        sl_p1, _ = model.slices["proj_w1"]
        sl_c1, _ = model.slices["proj_b1"]
        sl_p2, _ = model.slices["proj_w2"]
        sl_c2, _ = model.slices["proj_b2"]
        grads[sl_p2] += (tape.h2.T @ dV).ravel()
        grads[sl_c2] += dV.sum(axis=0)
        dh2 = dV @ model.get("proj_w2").T
        da2 = dh2 * (tape.a2 > 0)
        grads[sl_p1] += (tape.H.T @ da2).ravel()
        grads[sl_c1] += da2.sum(axis=0)
        dH += da2 @ model.get("proj_w1").T
    dX = _encode_bwd(model, tape.X, tape.a1, tape.h1, dH, grads, need_input_grad)
    return grads, dX


def forward_aux_batch(model: ModelState, X: np.ndarray) -> AuxTape:
    if model.role != AUXILIARY:
        raise StateError("forward_aux requires an auxiliary-role model")
    a1, h1, H = _encode_fwd(model, X)
    logits = H @ model.get("cls_w") + model.get("cls_b")
    return AuxTape(X, a1, h1, H, logits, softmax(logits), model.revision)


def backward_aux(
    model: ModelState,
    tape: AuxTape,
    d_logits: np.ndarray,
    need_input_grad: bool = False,
):
    if tape is None or tape.revision != model.revision:
        raise StateError("backward requires a tape recorded by a current forward pass")
    grads = np.zeros_like(model.params)
    sl_w, _ = model.slices["cls_w"]
    sl_b, _ = model.slices["cls_b"]
    grads[sl_w] += (tape.H.T @ d_logits).ravel()
    grads[sl_b] += d_logits.sum(axis=0)
    dH = d_logits @ model.get("cls_w").T
    dX = _encode_bwd(model, tape.X, tape.a1, tape.h1, dH, grads, need_input_grad)
    return grads, dX


def forward_main(model: ModelState, embedded: np.ndarray):
    """Single-input forward: returns (encoder hidden, projected z)."""
    X = pool_embedded(embedded)[None, :]
    tape = forward_main_batch(model, X)
    return tape.H[0], tape.Z[0]


def forward_aux(model: ModelState, embedded: np.ndarray):
    """Single-input forward: returns (logits, softmax probabilities)."""
    X = pool_embedded(embedded)[None, :]
    tape = forward_aux_batch(model, X)
    return tape.logits[0], tape.probs[0]


def hidden_batch(model: ModelState, examples) -> np.ndarray:
    """Encoder representations of a batch of examples (no projector/head)."""
    X = pooled_inputs(model, examples)
    _, _, H = _encode_fwd(model, X)
    return H


def hidden_from_embedded(model: ModelState, embedded_list) -> np.ndarray:
    """Encoder representations of already-embedded (e.g. perturbed) inputs."""
    _, _, H = _encode_fwd(model, pool_batch(embedded_list))
    return H


def projected_batch(model: ModelState, examples) -> np.ndarray:
    return forward_main_batch(model, pooled_inputs(model, examples)).Z


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float) -> None:
    """One in-place adaptive-moment update."""
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1**state.t)
    v_hat = state.v / (1 - state.beta2**state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def optimizer_step(model: ModelState, grads: np.ndarray, lr: float) -> ModelState:
    """Apply one Adam update to the model's flat parameter vector.

    Non-finite gradients abort with the offending slice named.
    """
    if grads.shape != model.params.shape:
        raise ConfigurationError("gradient shape does not match parameters")
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise NumericalError(f"non-finite gradient in slice {model.slice_name_of(bad)!r}")
    if model.opt is None:
        model.opt = AdamState(m=np.zeros_like(model.params), v=np.zeros_like(model.params))
    adam_step(model.params, grads, model.opt, lr)
    model.revision += 1
    return model


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


@dataclass
class GradientReport:
    max_rel_error: float
    worst_slice: str
    worst_index: int = -1


def finite_difference_report(
    f, x: np.ndarray, analytic: np.ndarray, h: float = 1e-5, slices=None
) -> GradientReport:
    """Compare an analytic gradient against central finite differences.

    ``f`` maps a vector like ``x`` to a scalar.  The relative error uses a
    floor of 1e-6 in the denominator so that near-zero coordinates do not
    amplify round-off noise.
    """
    worst = 0.0
    worst_i = -1
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        numeric = (f(xp) - f(xm)) / (2 * h)
        rel = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-6)
        if rel >= worst:
            worst, worst_i = rel, i
    name = ""
    if slices is not None and worst_i >= 0:
        for slice_name, (sl, _) in slices.items():
            if sl.start <= worst_i < sl.stop:
                name = slice_name
                break
    return GradientReport(max_rel_error=worst, worst_slice=name, worst_index=worst_i)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: ModelState, path) -> None:
    """Write parameters as named slices with a JSON config header."""
    header = {
        "version": CHECKPOINT_VERSION,
        "role": model.role,
        "config": vars(model.config),
        "proj_dim": model.proj_dim,
        "n_classes": model.n_classes,
        "normalize": model.normalize,
        "revision": model.revision,
    }
    arrays = {name: model.get(name) for name in model.slices}
    np.savez(path, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> ModelState:
    with np.load(path) as data:
        if "__header__" not in data:
            raise ValidationError("checkpoint missing header")
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(
                f"unsupported checkpoint version {header.get('version')!r}"
            )
        config = EncoderConfig(**header["config"])
        model = init_model(
            header["role"],
            config,
            seed=0,
            proj_dim=header["proj_dim"],
            n_classes=header["n_classes"],
            normalize=header["normalize"],
        )
        for name in model.slices:
            if name not in data:
                raise ValidationError(f"checkpoint missing slice {name!r}")
            model.get(name)[...] = data[name]
        model.revision = header["revision"]
    return model
