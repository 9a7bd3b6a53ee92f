"""Per-chunk action classifier: one LSTM layer plus a softmax head."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .recurrent import (
    AdamState,
    AffineHead,
    LstmParams,
    NumericError,
    RecurrentState,
    ShapeError,
    adam_update,
    affine_softmax,
    clip_by_global_norm,
    head_backward,
    load_checkpoint,
    log_softmax,
    lstm_backward,
    lstm_forward,
    lstm_stepper,
    lstm_step,
    save_checkpoint,
    softmax,
)

from .streams import STREAM_FORMAT_VERSION, StreamFormatError, read_jsonl_records

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClsModel:
    lstm: LstmParams
    head: AffineHead

    def __post_init__(self):
        if self.head.out_dim < 2:
            raise ShapeError("classifier needs background plus at least one action class")
        if self.head.W.shape[0] != self.lstm.hidden_dim:
            raise ShapeError("head input size must equal the LSTM hidden size")

    @property
    def num_classes(self) -> int:
        return self.head.out_dim

    @classmethod
    def init(cls, feature_dim: int, num_classes: int, hidden_dim: int = 64, seed=0):
        rng = np.random.default_rng(seed)
        return cls(LstmParams.init(feature_dim, hidden_dim, rng), AffineHead.init(hidden_dim, num_classes, rng))

    @classmethod
    def zeros(cls, feature_dim: int, num_classes: int, hidden_dim: int = 64):
        return cls(LstmParams.zeros(feature_dim, hidden_dim), AffineHead.zeros(hidden_dim, num_classes))

    def params(self) -> dict[str, np.ndarray]:
        return {**self.lstm.arrays("lstm"), **self.head.arrays("head")}

    @classmethod
    def from_params(cls, params):
        return cls(LstmParams.from_arrays(params, "lstm"), AffineHead.from_arrays(params, "head"))

    def save(self, path, meta=None):
        save_checkpoint(path, "clsnet", self.params(), meta)

    @classmethod
    def load(cls, path):
        params, meta = load_checkpoint(path, "clsnet")
        return cls.from_params(params), meta


@dataclass(frozen=True)
class ClsStreamState:
    recurrent: RecurrentState
    t: int = 0

    @classmethod
    def initial(cls, model: ClsModel):
        return cls(RecurrentState.zeros(model.lstm.hidden_dim), 0)


def cls_step(model: ClsModel, state: ClsStreamState, feature):
    """Score one chunk. Returns ``(p_t, next_state)``."""
    rec = lstm_step(model.lstm, state.recurrent, feature)
    return affine_softmax(model.head, rec.h), ClsStreamState(rec, state.t + 1)


def cls_infer_stream(model: ClsModel, stream) -> np.ndarray:
    """``(T, K)`` class distributions, folding :func:`cls_step` from the zero state.

    The loop is :func:`cls_step` with the per-step checks hoisted out; the
    arithmetic is the same, so results match step-by-step inference exactly.
    """
    feats = np.asarray(getattr(stream, "features", stream), dtype=np.float64)
    out = np.empty((len(feats), model.num_classes))
    if not len(feats):
        return out
    state = ClsStreamState.initial(model)
    out[0], state = cls_step(model, state, feats[0])
    h, c = state.recurrent.h, state.recurrent.c
    W, b = model.head.W, model.head.b
    step = lstm_stepper(model.lstm)
    for t in range(1, len(feats)):
        h, c = step(h, c, feats[t])
        out[t] = softmax(h.dot(W) + b)
    return out


def cls_loss_and_grad(params: dict, features, labels):
    """Mean per-chunk cross-entropy over a ``(T, B, D)`` window batch, with gradients."""
    model = ClsModel.from_params(params)
    labels = np.asarray(labels)
    hs, cache = lstm_forward(model.lstm, features)
    logits = model.head(hs)
    logp = log_softmax(logits)
    n = labels.size
    loss = -np.take_along_axis(logp, labels[..., None], axis=-1).sum() / n
    dlogits = softmax(logits)
    np.put_along_axis(dlogits, labels[..., None], np.take_along_axis(dlogits, labels[..., None], -1) - 1.0, -1)
    dlogits /= n
    grads, dhs = head_backward(model.head, hs, dlogits, "head")
    grads.update(lstm_backward(model.lstm, cache, dhs, "lstm"))
    return loss, grads


def _windows(streams, offsets):
    feats = np.stack([streams[s].features[o : o + L] for s, o, L in offsets], axis=1)
    labels = np.stack([streams[s].labels[o : o + L] for s, o, L in offsets], axis=1)
    return feats, labels


def train_clsnet(
    model: ClsModel,
    streams,
    seq_len: int = 64,
    batch: int = 32,
    epochs: int = 10,
    lr: float = 5e-4,
    weight_decay: float = 5e-4,
    seed=0,
    clip_norm: float = 5.0,
):
    """Train on random contiguous windows (state reset per window).

    Returns ``(model, loss_curve)``; ``loss_curve[0]`` is the loss of the
    untrained model on the first epoch's batches and ``loss_curve[e]`` the
    mean training loss of epoch ``e``.
    """
    lengths = np.array([len(s) for s in streams])
    if not len(streams) or (lengths < seq_len).all():
        raise ValueError(f"no stream is at least seq_len={seq_len} chunks long")
    usable = np.flatnonzero(lengths >= seq_len)
    n_offsets = lengths[usable] - seq_len + 1
    steps = max(1, math.ceil(lengths.sum() / (seq_len * batch)))
    rng = np.random.default_rng(seed)
    params = model.params()
    opt = AdamState()
    curve = []
    for epoch in range(epochs):
        total = 0.0
        for step in range(steps):
            # every window equally likely
            pick = rng.choice(len(usable), batch, p=n_offsets / n_offsets.sum())
            offs = rng.integers(0, n_offsets[pick])
            feats, labels = _windows(streams, [(usable[p], o, seq_len) for p, o in zip(pick, offs)])
            loss, grads = cls_loss_and_grad(params, feats, labels)
            if not math.isfinite(loss):
                raise NumericError(f"cross-entropy became {loss} at epoch {epoch}, step {step}")
            if epoch == 0 and step == 0:
                curve.append(float(loss))
            total += float(loss)
            grads, _ = clip_by_global_norm(grads, clip_norm)
            params, opt = adam_update(params, grads, opt, lr, weight_decay)
        curve.append(total / steps)
        log.info("clsnet epoch %d loss %.4f", epoch + 1, curve[-1])
    if not epochs:
        return model, curve
    return ClsModel.from_params(params), curve


def frame_accuracy(model: ClsModel, streams) -> float:
    hits = total = 0
    for s in streams:
        pred = cls_infer_stream(model, s).argmax(axis=1)
        hits += int((pred == s.labels).sum())
        total += len(s)
    return hits / total


def save_scores(scores, path, name: str = "", meta: dict | None = None) -> None:
    """Cached classifier output as JSONL: a header, then one ``{t, p}`` record per chunk."""
    scores = np.asarray(scores, dtype=np.float64)
    header = {"version": STREAM_FORMAT_VERSION, "kind": "scores", "K": scores.shape[1], "length": len(scores), "name": name}
    if meta:
        header["meta"] = meta
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps({"t": t, "p": row.tolist()}) for t, row in enumerate(scores)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_scores(path) -> np.ndarray:
    header, body = read_jsonl_records(path, ("t", "p"))
    if header.get("kind") != "scores" or "K" not in header:
        raise StreamFormatError(f"{path}:1: not a score file")
    K = header["K"]
    out = np.empty((len(body), K))
    for i, (lineno, rec) in enumerate(body):
        if len(rec["p"]) != K:
            raise StreamFormatError(f"{path}:{lineno}: field p has length {len(rec['p'])}, header K is {K}")
        out[i] = rec["p"]
    return out
