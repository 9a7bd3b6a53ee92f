"""LSTM and affine-head numerics with hand-written backprop through time.

Numerics default to float64; other floating dtypes pass through unchanged
so gradient checks can run in extended precision. Parameters travel as flat
``dict[str, ndarray]`` mappings so that gradients, optimizer moments and
checkpoints all share one naming scheme, e.g. ``"lstm.W_x"`` or
``"head.b"``.

Gate layout inside the stacked ``4 * hidden`` axis is (input, forget,
output, candidate).

Shapes accept arbitrary leading batch dimensions: ``x`` may be ``(D,)``
for a single stream or ``(B, D)`` for a batch of streams.
"""
from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when an array does not have the dimensions an operation needs."""


class NumericError(FloatingPointError):
    """Raised when a loss, gradient or parameter stops being finite."""


def as_float(x):
    """Array view of ``x`` keeping any floating dtype; everything else becomes float64."""
    x = np.asarray(x)
    return x if np.issubdtype(x.dtype, np.floating) else x.astype(np.float64)


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(logits):
    if logits.ndim == 1:
        # keepdims reductions cost several microseconds per streaming step
        e = np.exp(logits - np.maximum.reduce(logits))
        return e / np.add.reduce(e)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class LstmParams:
    W_x: np.ndarray  # (input_dim, 4 * hidden_dim)
    W_h: np.ndarray  # (hidden_dim, 4 * hidden_dim)
    b: np.ndarray  # (4 * hidden_dim,)

    def __post_init__(self):
        d, g = self.W_x.shape
        if g % 4:
            raise ShapeError(f"W_x has {g} gate columns, not a multiple of 4")
        h = g // 4
        if self.W_h.shape != (h, g):
            raise ShapeError(f"W_h has shape {self.W_h.shape}, expected {(h, g)}")
        if self.b.shape != (g,):
            raise ShapeError(f"b has shape {self.b.shape}, expected {(g,)}")

    @property
    def input_dim(self) -> int:
        return self.W_x.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W_h.shape[0]

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator, forget_bias: float = 1.0):
        k = 1.0 / math.sqrt(hidden_dim)
        W_x = rng.uniform(-k, k, size=(input_dim, 4 * hidden_dim))
        W_h = rng.uniform(-k, k, size=(hidden_dim, 4 * hidden_dim))
        b = np.zeros(4 * hidden_dim)
        b[hidden_dim : 2 * hidden_dim] = forget_bias
        return cls(W_x, W_h, b)

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int):
        return cls(
            np.zeros((input_dim, 4 * hidden_dim)),
            np.zeros((hidden_dim, 4 * hidden_dim)),
            np.zeros(4 * hidden_dim),
        )

    def arrays(self, prefix: str = "lstm") -> dict[str, np.ndarray]:
        return {f"{prefix}.W_x": self.W_x, f"{prefix}.W_h": self.W_h, f"{prefix}.b": self.b}

    @classmethod
    def from_arrays(cls, arrays, prefix: str = "lstm"):
        return cls(
            as_float(arrays[f"{prefix}.W_x"]),
            as_float(arrays[f"{prefix}.W_h"]),
            as_float(arrays[f"{prefix}.b"]),
        )


@dataclass(frozen=True)
class RecurrentState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden_dim: int, batch: tuple[int, ...] = ()):
        return cls(np.zeros(batch + (hidden_dim,)), np.zeros(batch + (hidden_dim,)))


@dataclass(frozen=True)
class AffineHead:
    W: np.ndarray  # (hidden_dim, out_dim)
    b: np.ndarray  # (out_dim,)

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ShapeError(f"head W {self.W.shape} and b {self.b.shape} disagree")
        if self.W.shape[1] < 1:
            raise ShapeError("head needs at least one output")

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]

    @classmethod
    def init(cls, hidden_dim: int, out_dim: int, rng: np.random.Generator):
        k = 1.0 / math.sqrt(hidden_dim)
        return cls(rng.uniform(-k, k, size=(hidden_dim, out_dim)), np.zeros(out_dim))

    @classmethod
    def zeros(cls, hidden_dim: int, out_dim: int):
        return cls(np.zeros((hidden_dim, out_dim)), np.zeros(out_dim))

    def arrays(self, prefix: str = "head") -> dict[str, np.ndarray]:
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}

    @classmethod
    def from_arrays(cls, arrays, prefix: str = "head"):
        return cls(
            as_float(arrays[f"{prefix}.W"]),
            as_float(arrays[f"{prefix}.b"]),
        )

    def __call__(self, h):
        if h.shape[-1] != self.W.shape[0]:
            raise ShapeError(f"hidden vector has length {h.shape[-1]}, head expects {self.W.shape[0]}")
        return h.dot(self.W) + self.b


def _check_step_inputs(params: LstmParams, state: RecurrentState, x):
    if x.shape[-1] != params.input_dim:
        raise ShapeError(f"input has length {x.shape[-1]}, cell expects {params.input_dim}")
    H = params.hidden_dim
    if state.h.shape[-1] != H or state.c.shape[-1] != H:
        raise ShapeError(
            f"state has sizes h={state.h.shape[-1]}, c={state.c.shape[-1]}; cell hidden size is {H}"
        )


@functools.lru_cache(maxsize=None)
def _gate_scale(H: int) -> np.ndarray:
    scale = np.ones(4 * H)
    scale[: 3 * H] = 0.5
    scale.flags.writeable = False
    return scale


def _activate(z, H: int):
    """Gate activations from pre-activations ``z`` with one ``tanh`` call.

    Same values as :func:`sigmoid` on the first ``3H`` columns and ``tanh`` on
    the rest; fewer numpy calls matter when stepping one chunk at a time.
    """
    a = np.tanh(z * _gate_scale(H))
    ifo = (a[..., : 3 * H] + 1.0) * 0.5
    return ifo[..., :H], ifo[..., H : 2 * H], ifo[..., 2 * H :], a[..., 3 * H :]


def _gates(params: LstmParams, h, x):
    return _activate(x.dot(params.W_x) + h.dot(params.W_h) + params.b, params.hidden_dim)


def lstm_cell(params: LstmParams, h, c, x):
    """One step without checks: ``(h', c', gates)`` for building custom unrolls."""
    i, f, o, g = _gates(params, h, x)
    c = f * c + i * g
    return o * np.tanh(c), c, (i, f, o, g)


def lstm_step(params: LstmParams, state: RecurrentState, x) -> RecurrentState:
    """Advance the cell by one input; returns a new state, arguments untouched."""
    x = as_float(x)
    _check_step_inputs(params, state, x)
    i, f, o, g = _gates(params, state.h, x)
    c = f * state.c + i * g
    return RecurrentState(o * np.tanh(c), c)


def lstm_stepper(params: LstmParams):
    """Unchecked single-example step ``(h, c, x) -> (h', c')`` with the weights bound once.

    Same arithmetic as :func:`lstm_cell`, so results are bit-identical; used by
    the chunk-at-a-time inference loops where call overhead dominates.
    """
    W_x, W_h, b, H = params.W_x, params.W_h, params.b, params.hidden_dim
    scale = _gate_scale(H)
    H2, H3 = 2 * H, 3 * H

    def step(h, c, x):
        a = x.dot(W_x)
        a += h.dot(W_h)
        a += b
        a *= scale
        np.tanh(a, out=a)
        ifo = a[:H3]
        ifo += 1.0
        ifo *= 0.5
        c = ifo[H:H2] * c
        c += ifo[:H] * a[H3:]
        h = np.tanh(c)
        h *= ifo[H2:H3]
        return h, c

    return step


def affine_softmax(head: AffineHead, h):
    return softmax(head(as_float(h)))


@dataclass
class LstmCache:
    xs: np.ndarray
    hs: np.ndarray  # (T + 1, ..., H), hs[0] is the initial state
    cs: np.ndarray
    gates: list = field(default_factory=list)


def lstm_forward(params: LstmParams, xs, state: RecurrentState | None = None):
    """Run the cell over ``xs`` of shape ``(T, ..., D)``.

    Returns hidden outputs ``(T, ..., H)`` and a cache for :func:`lstm_backward`.
    """
    xs = as_float(xs)
    T = xs.shape[0]
    batch = xs.shape[1:-1]
    H = params.hidden_dim
    if state is None:
        state = RecurrentState.zeros(H, batch)
    _check_step_inputs(params, state, xs[0] if T else np.zeros(batch + (params.input_dim,)))
    hs = np.empty((T + 1,) + batch + (H,), dtype=np.result_type(xs, params.W_x, state.h))
    cs = np.empty_like(hs)
    hs[0], cs[0] = state.h, state.c
    # input projection for all steps at once
    zx = xs @ params.W_x + params.b
    cache = LstmCache(xs, hs, cs)
    for t in range(T):
        z = zx[t] + hs[t] @ params.W_h
        i, f, o, g = _activate(z, H)
        cs[t + 1] = f * cs[t] + i * g
        hs[t + 1] = o * np.tanh(cs[t + 1])
        cache.gates.append((i, f, o, g))
    return hs[1:], cache


def cell_backward(params: LstmParams, cache: LstmCache, t: int, dh, dc_next):
    """Backprop one step given the total ``dL/dh_t`` and the cell gradient from step ``t + 1``.

    Returns ``(dz_t, dh_{t-1}, dc_{t-1})`` where ``dz_t`` is the gradient of
    the pre-activations, so ``dz_t @ W_x.T`` is the gradient of the input.
    """
    H = params.hidden_dim
    i, f, o, g = cache.gates[t]
    tc = np.tanh(cache.cs[t + 1])
    dc = dc_next + dh * o * (1.0 - tc * tc)
    dz = np.empty(dh.shape[:-1] + (4 * H,), dtype=np.result_type(dh, cache.hs))
    dz[..., :H] = dc * g * i * (1.0 - i)
    dz[..., H : 2 * H] = dc * cache.cs[t] * f * (1.0 - f)
    dz[..., 2 * H : 3 * H] = dh * tc * o * (1.0 - o)
    dz[..., 3 * H :] = dc * i * (1.0 - g * g)
    return dz, dz @ params.W_h.T, dc * f


def lstm_param_grads(params: LstmParams, cache: LstmCache, dz_all, prefix: str = "lstm"):
    """Weight gradients from the per-step pre-activation gradients ``(T, ..., 4H)``."""
    H = params.hidden_dim
    flat_dz = dz_all.reshape(-1, 4 * H)
    return {
        f"{prefix}.W_x": cache.xs.reshape(-1, params.input_dim).T @ flat_dz,
        f"{prefix}.W_h": cache.hs[:-1].reshape(-1, H).T @ flat_dz,
        f"{prefix}.b": flat_dz.sum(axis=0),
    }


def lstm_backward(params: LstmParams, cache: LstmCache, dhs, prefix: str = "lstm"):
    """Backprop ``dL/dh_t`` for every step through the whole sequence.

    Returns the parameter gradients keyed like :meth:`LstmParams.arrays`.
    """
    T = len(cache.gates)
    if dhs.shape[0] != T:
        raise ShapeError(f"got {dhs.shape[0]} hidden gradients for a sequence of length {T}")
    dz_all = np.empty(cache.xs.shape[:-1] + (4 * params.hidden_dim,), dtype=cache.hs.dtype)
    dh_next = np.zeros_like(cache.hs[0])
    dc_next = np.zeros_like(cache.cs[0])
    for t in reversed(range(T)):
        dz_all[t], dh_next, dc_next = cell_backward(params, cache, t, dhs[t] + dh_next, dc_next)
    return lstm_param_grads(params, cache, dz_all, prefix)


def head_backward(head: AffineHead, hs, dout, prefix: str = "head"):
    """Gradients of an affine head plus the gradient flowing back into ``hs``."""
    flat_h = hs.reshape(-1, head.W.shape[0])
    flat_d = dout.reshape(-1, head.out_dim)
    grads = {f"{prefix}.W": flat_h.T @ flat_d, f"{prefix}.b": flat_d.sum(axis=0)}
    return grads, dout @ head.W.T


def sequence_grads(params: LstmParams, head: AffineHead, inputs, dlogits, state=None):
    """Exact gradients of ``sum_t loss_t`` given ``dloss_t / dlogits_t`` at each step.

    ``dlogits`` must be aligned with ``inputs`` along the leading time axis.
    """
    inputs = as_float(inputs)
    dlogits = as_float(dlogits)
    if inputs.shape[0] != dlogits.shape[0]:
        raise ShapeError(
            f"{inputs.shape[0]} inputs but {dlogits.shape[0]} loss gradients; sequences must align"
        )
    hs, cache = lstm_forward(params, inputs, state)
    grads, dhs = head_backward(head, hs, dlogits)
    grads.update(lstm_backward(params, cache, dhs))
    return grads


def finite_diff_check(
    loss_and_grad, params: dict, eps: float = 1e-6, max_entries: int | None = None, rng=None, dtype=None
):
    """Largest relative error between analytic gradients and central differences.

    ``loss_and_grad(params) -> (loss, grads)`` with ``grads`` keyed like
    ``params``. The analytic gradient is taken at ``params`` as given; the
    perturbed losses are evaluated with parameters cast to ``dtype`` when it
    is set (``np.longdouble`` lowers the difference quotient's rounding
    floor below what float64 allows). When ``max_entries`` is given, that
    many entries per tensor are sampled.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    loss, grads = loss_and_grad(params)
    if not np.isfinite(loss):
        raise NumericError(f"loss is not finite: {loss}")
    base = {k: np.asarray(v, dtype=dtype) if dtype is not None else v for k, v in params.items()}
    worst = 0.0
    for name, value in base.items():
        analytic = np.asarray(grads[name], dtype=np.float64)
        if analytic.shape != value.shape:
            raise ShapeError(f"gradient for {name} has shape {analytic.shape}, parameter has {value.shape}")
        flat_idx = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            flat_idx = (rng or np.random.default_rng(0)).choice(value.size, max_entries, replace=False)
        for j in flat_idx:
            idx = np.unravel_index(j, value.shape)
            plus, minus = value.copy(), value.copy()
            plus[idx] += eps
            minus[idx] -= eps
            vals = []
            for bumped in (plus, minus):
                trial = dict(base)
                trial[name] = bumped
                lv = loss_and_grad(trial)[0]
                if not np.isfinite(lv):
                    raise NumericError(f"loss is not finite after perturbing {name}{list(idx)}")
                vals.append(lv)
            # divide by the step actually taken, which rounding may have shifted
            fd = float((vals[0] - vals[1]) / (plus[idx] - minus[idx]))
            a = float(analytic[idx])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-12)
            worst = max(worst, rel)
    return worst


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float = 5e-4,
    weight_decay: float = 5e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
):
    """One Adam step with decoupled weight decay. Returns ``(new_params, new_state)``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    b1, b2 = betas
    step = state.step + 1
    new_params, m, v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m[name] = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v[name] = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1**step)
        v_hat = v[name] / (1 - b2**step)
        new_params[name] = p - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p)
    return new_params, AdamState(step, m, v)


def save_checkpoint(path, kind: str, params: dict, meta: dict | None = None):
    """Write parameters as a JSON container with flat row-major tensors."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "meta": meta or {},
        "tensors": {
            name: {"shape": list(a.shape), "data": np.asarray(a, dtype=np.float64).ravel().tolist()}
            for name, a in sorted(params.items())
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path, kind: str | None = None):
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('format_version')!r}")
    if kind is not None and doc.get("kind") != kind:
        raise ValueError(f"{path}: checkpoint holds {doc.get('kind')!r}, expected {kind!r}")
    params = {}
    for name, t in doc["tensors"].items():
        data = np.asarray(t["data"], dtype=np.float64)
        if data.size != math.prod(t["shape"]):
            raise ShapeError(f"{path}: tensor {name} has {data.size} values for shape {t['shape']}")
        params[name] = data.reshape(t["shape"])
    return params, doc["meta"]
