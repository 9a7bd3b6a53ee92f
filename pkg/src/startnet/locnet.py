"""Class-agnostic start localizer trained with REINFORCE and a learned baseline.

The localizer reads the classifier's score vector ``p_t`` concatenated with
its own last ``n`` start probabilities and emits a two-way softmax whose
component 0 is the start probability ``s_t``. During training a decision
``d_t = clip(a_t, 0, 1)`` with ``a_t ~ N(s_t, sigma^2)`` is rewarded with
``alpha * g_t * d_t - (1 - g_t) * d_t``.

The history is a deterministic function of the parameters, so training
losses backpropagate through the fed-back start probabilities as well as
through the recurrence. The baseline head sits on a detached copy of the
hidden state, so the l2 baseline loss only moves the baseline head.
"""
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
    LstmCache,
    adam_update,
    cell_backward,
    clip_by_global_norm,
    head_backward,
    load_checkpoint,
    log_softmax,
    lstm_cell,
    lstm_param_grads,
    lstm_stepper,
    lstm_step,
    save_checkpoint,
    softmax,
)
from .streams import STREAM_FORMAT_VERSION, BalancedSequenceSampler, StreamFormatError, imbalance_ratio, read_jsonl_records

log = logging.getLogger(__name__)

START = 0  # index of the start component in the two-way output


@dataclass(frozen=True)
class LocModel:
    lstm: LstmParams
    policy: AffineHead
    baseline: AffineHead
    history: int = 8

    def __post_init__(self):
        if self.history < 0:
            raise ShapeError("history length cannot be negative")
        if self.policy.out_dim != 2 or self.baseline.out_dim != 1:
            raise ShapeError("policy head must have 2 outputs and baseline head 1")
        if self.lstm.input_dim <= self.history:
            raise ShapeError("LSTM input must hold the class scores plus the history")

    @property
    def num_classes(self) -> int:
        return self.lstm.input_dim - self.history

    @classmethod
    def init(cls, num_classes: int, history: int = 8, hidden_dim: int = 128, seed=0):
        rng = np.random.default_rng(seed)
        return cls(
            LstmParams.init(num_classes + history, hidden_dim, rng),
            AffineHead.init(hidden_dim, 2, rng),
            AffineHead.init(hidden_dim, 1, rng),
            history,
        )

    @classmethod
    def zeros(cls, num_classes: int, history: int = 8, hidden_dim: int = 128):
        return cls(
            LstmParams.zeros(num_classes + history, hidden_dim),
            AffineHead.zeros(hidden_dim, 2),
            AffineHead.zeros(hidden_dim, 1),
            history,
        )

    def params(self) -> dict[str, np.ndarray]:
        return {**self.lstm.arrays("lstm"), **self.policy.arrays("policy"), **self.baseline.arrays("baseline")}

    def with_params(self, params):
        return LocModel(
            LstmParams.from_arrays(params, "lstm"),
            AffineHead.from_arrays(params, "policy"),
            AffineHead.from_arrays(params, "baseline"),
            self.history,
        )

    def save(self, path, meta=None):
        meta = dict(meta or {})
        meta["history"] = self.history
        save_checkpoint(path, "locnet", self.params(), meta)

    @classmethod
    def load(cls, path):
        params, meta = load_checkpoint(path, "locnet")
        model = cls(
            LstmParams.from_arrays(params, "lstm"),
            AffineHead.from_arrays(params, "policy"),
            AffineHead.from_arrays(params, "baseline"),
            int(meta["history"]),
        )
        return model, meta


@dataclass(frozen=True)
class DecisionHistory:
    """Last ``n`` start probabilities, oldest first."""

    values: np.ndarray

    @classmethod
    def zeros(cls, n: int, batch: tuple[int, ...] = ()):
        return cls(np.zeros(batch + (n,)))

    def push(self, s_start):
        if self.values.shape[-1] == 0:
            return self
        s_start = np.asarray(s_start, dtype=np.float64)
        vals = np.concatenate([self.values[..., 1:], s_start[..., None]], axis=-1)
        return DecisionHistory(vals)


def loc_step(model: LocModel, state: RecurrentState, p_t, history: DecisionHistory):
    """One inference step. Returns ``(s_t, v_t, next_state, next_history)``.

    ``s_t`` is the full two-way distribution; only ``s_t[START]`` enters the
    history.
    """
    p_t = np.asarray(p_t, dtype=np.float64)
    if p_t.shape[-1] != model.num_classes:
        raise ShapeError(f"score vector has length {p_t.shape[-1]}, localizer expects {model.num_classes}")
    if history.values.shape[-1] != model.history:
        raise ShapeError(f"history has length {history.values.shape[-1]}, localizer expects {model.history}")
    x = np.concatenate([p_t, history.values], axis=-1)
    nxt = lstm_step(model.lstm, state, x)
    s = softmax(model.policy(nxt.h))
    v = model.baseline(nxt.h)[..., 0]
    return s, v, nxt, history.push(s[..., START])


def loc_infer_stream(model: LocModel, scores) -> np.ndarray:
    """Greedy start probabilities for a ``(T, K)`` score sequence, zero history and state."""
    scores = np.asarray(scores, dtype=np.float64)
    out = np.empty(len(scores))
    if not len(scores):
        return out
    # first step through loc_step for its checks; the rest repeats its arithmetic
    s, _, state, hist = loc_step(model, RecurrentState.zeros(model.lstm.hidden_dim), scores[0], DecisionHistory.zeros(model.history))
    out[0] = s[START]
    h, c = state.h, state.c
    K, n = model.num_classes, model.history
    x = np.concatenate([scores[0], hist.values])  # reused input buffer [p_t, H_{t-1}]
    W, b = model.policy.W, model.policy.b
    step = lstm_stepper(model.lstm)
    for t in range(1, len(scores)):
        x[:K] = scores[t]
        h, c = step(h, c, x)
        s = softmax(h.dot(W) + b)
        out[t] = s[START]
        if n:
            x[K:-1] = x[K + 1 :]
            x[-1] = s[START]
    return out


def save_start_probs(s_start, path, name: str = "", meta: dict | None = None) -> None:
    """Start probabilities as JSONL: a header, then one ``{t, s}`` record per chunk."""
    s_start = np.asarray(s_start, dtype=np.float64)
    header = {"version": STREAM_FORMAT_VERSION, "kind": "start_probs", "length": len(s_start), "name": name}
    if meta:
        header["meta"] = meta
    lines = [json.dumps(header, sort_keys=True)] + [json.dumps({"t": t, "s": float(v)}) for t, v in enumerate(s_start)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_start_probs(path) -> np.ndarray:
    header, body = read_jsonl_records(path, ("t", "s"))
    if header.get("kind") != "start_probs":
        raise StreamFormatError(f"{path}:1: not a start-probability file")
    return np.array([rec["s"] for _, rec in body], dtype=np.float64)


def draw_decision(s_start, sigma: float = 0.1, rng: np.random.Generator | None = None):
    """Raw Gaussian sample ``a ~ N(s, sigma^2)`` and the decision ``clip(a, 0, 1)``.

    The clamp belongs to the reward side: the policy's log-likelihood is
    evaluated at ``a``. Scoring the clamped value instead biases the
    gradient near 0 and 1 and pins the policy to whichever end it drifts to.
    """
    s_start = np.asarray(s_start, dtype=np.float64)
    a = s_start + sigma * rng.standard_normal(s_start.shape) if sigma else s_start.copy()
    return a, np.clip(a, 0.0, 1.0)


def sample_decision(s_start, sigma: float = 0.1, rng: np.random.Generator | None = None):
    """Clamped decision ``d = clip(N(s, sigma^2), 0, 1)``."""
    d = draw_decision(s_start, sigma, rng)[1]
    return d if d.ndim else float(d)


def immediate_reward(g, d, alpha: float):
    g = np.asarray(g, dtype=np.float64)
    return alpha * g * d - (1.0 - g) * d


def discounted_returns(rewards, gamma: float = 0.9):
    """``R_t = r_t + gamma * R_{t+1}`` along axis 0, zero past the end."""
    rewards = np.asarray(rewards, dtype=np.float64)
    R = np.empty_like(rewards)
    acc = np.zeros(rewards.shape[1:])
    for t in reversed(range(rewards.shape[0])):
        acc = rewards[t] + gamma * acc
        R[t] = acc
    return R


@dataclass
class Trajectory:
    """A batch of rollouts, time-major: ``(T, B)`` fields plus per-step inputs.

    ``history[t]`` is the snapshot ``H_{t-1}`` that the cell saw next to
    ``scores[t]``.
    """

    scores: np.ndarray  # (T, B, K)
    history: np.ndarray  # (T, B, n)
    s: np.ndarray
    a: np.ndarray  # raw Gaussian samples
    d: np.ndarray  # decisions, a clamped to [0, 1]
    g: np.ndarray
    r: np.ndarray
    R: np.ndarray
    v: np.ndarray

    @property
    def inputs(self):
        return np.concatenate([self.scores, self.history], axis=-1)

    @property
    def advantages(self):
        return self.R - self.v


def rollout(model: LocModel, scores, flags, alpha: float, gamma: float = 0.9, sigma: float = 0.1, rng=None):
    """Run the current policy over ``(T, B, K)`` scores and collect a :class:`Trajectory`."""
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags, dtype=np.float64)
    T, B = scores.shape[:2]
    state = RecurrentState.zeros(model.lstm.hidden_dim, (B,))
    hist = DecisionHistory.zeros(model.history, (B,))
    history = np.empty((T, B, model.history))
    s_out, a_out, d_out, v_out = np.empty((4, T, B))
    for t in range(T):
        history[t] = hist.values
        s, v, state, hist = loc_step(model, state, scores[t], hist)
        s_out[t] = s[:, START]
        v_out[t] = v
        a_out[t], d_out[t] = draw_decision(s_out[t], sigma, rng)
    r = immediate_reward(flags, d_out, alpha)
    return Trajectory(scores, history, s_out, a_out, d_out, flags, r, discounted_returns(r, gamma), v_out)


def closed_loop_forward(lstm: LstmParams, policy: AffineHead, scores):
    """Unroll the localizer over ``(T, ..., K)`` scores, feeding its start probabilities back.

    Returns ``(hs, s_start, cache)`` with the inputs the cell actually saw in
    ``cache.xs``.
    """
    scores = np.asarray(scores)
    T, K = scores.shape[0], scores.shape[-1]
    n = lstm.input_dim - K
    batch = scores.shape[1:-1]
    dtype = np.result_type(scores, lstm.W_x)
    H = lstm.hidden_dim
    xs = np.empty((T,) + batch + (K + n,), dtype=dtype)
    hs = np.zeros((T + 1,) + batch + (H,), dtype=dtype)
    cs = np.zeros_like(hs)
    s = np.empty((T,) + batch, dtype=dtype)
    cache = LstmCache(xs, hs, cs)
    hist = np.zeros(batch + (n,), dtype=dtype)
    for t in range(T):
        xs[t, ..., :K] = scores[t]
        xs[t, ..., K:] = hist
        hs[t + 1], cs[t + 1], gates = lstm_cell(lstm, hs[t], cs[t], xs[t])
        cache.gates.append(gates)
        s[t] = softmax(policy(hs[t + 1]))[..., START]
        if n:
            hist = np.concatenate([hist[..., 1:], s[t][..., None]], axis=-1)
    return hs[1:], s, cache


def closed_loop_backward(lstm: LstmParams, policy: AffineHead, cache: LstmCache, s, dlogits, num_classes: int):
    """Exact gradients given the direct ``dL/dlogits_t`` at every step.

    Each step's start probability also reaches the inputs of the next ``n``
    steps, so the gradient on ``s_t`` is completed by those later steps
    before step ``t`` is processed.
    """
    T = len(cache.gates)
    K = num_classes
    n = lstm.input_dim - K
    hs = cache.hs[1:]
    ds_fb = np.zeros_like(s)
    dz_all = np.empty(cache.xs.shape[:-1] + (4 * lstm.hidden_dim,), dtype=cache.hs.dtype)
    dlog_all = np.empty_like(dlogits)
    dh_next = np.zeros_like(cache.hs[0])
    dc_next = np.zeros_like(cache.cs[0])
    W_hist = lstm.W_x[K:]
    for t in reversed(range(T)):
        fb = ds_fb[t] * s[t] * (1.0 - s[t])
        dlog = dlogits[t].copy()
        dlog[..., START] += fb
        dlog[..., 1 - START] -= fb
        dlog_all[t] = dlog
        dz_all[t], dh_next, dc_next = cell_backward(lstm, cache, t, dlog @ policy.W.T + dh_next, dc_next)
        if n:
            dhist = dz_all[t] @ W_hist.T  # slot j holds s_{t - n + j}
            for j in range(max(0, n - t), n):
                ds_fb[t - n + j] += dhist[..., j]
    grads, _ = head_backward(policy, hs, dlog_all, "policy")
    grads.update(lstm_param_grads(lstm, cache, dz_all, "lstm"))
    return grads


def _unroll(params, scores):
    lstm = LstmParams.from_arrays(params, "lstm")
    policy = AffineHead.from_arrays(params, "policy")
    hs, s, cache = closed_loop_forward(lstm, policy, scores)
    return lstm, policy, hs, s, cache


def policy_surrogate(params: dict, traj: Trajectory, advantages=None, sigma: float = 0.1):
    """``-sum_t A_t log N(a_t; s_t, sigma^2)`` averaged over the batch, with gradients.

    The start probabilities are recomputed from ``traj.scores`` under
    ``params``; the sampled decisions and the advantages are constants
    (by default ``traj.R - traj.v``). The likelihood is taken at the raw
    samples ``a_t``; the clamped ``d_t`` only enter through the rewards.
    Only the LSTM and policy head receive gradient.
    """
    lstm, policy, hs, s, cache = _unroll(params, traj.scores)
    adv = traj.advantages if advantages is None else np.asarray(advantages)
    B = traj.s.shape[1]
    var = sigma * sigma
    logpi = -((traj.a - s) ** 2) / (2 * var) - math.log(sigma * math.sqrt(2 * math.pi))
    loss = -np.sum(adv * logpi) / B
    # dlog(pi)/ds = (a - s) / sigma^2, ds/dz0 = -ds/dz1 = s (1 - s)
    dz0 = -adv * (traj.a - s) / var / B * s * (1.0 - s)
    dlogits = np.stack([dz0, -dz0], axis=-1)
    return loss, closed_loop_backward(lstm, policy, cache, s, dlogits, traj.scores.shape[-1])


def baseline_loss(params: dict, traj: Trajectory):
    """``0.5 * sum_t (R_t - v_t)^2`` averaged over the batch; gradient for the baseline head only."""
    _, _, hs, _, _ = _unroll(params, traj.scores)
    baseline = AffineHead.from_arrays(params, "baseline")
    B = traj.s.shape[1]
    err = traj.R - baseline(hs)[..., 0]
    grads, _ = head_backward(baseline, hs, (-err / B)[..., None], "baseline")
    return 0.5 * np.sum(err * err) / B, grads


def pg_loss_and_grad(
    params: dict,
    traj: Trajectory,
    advantages=None,
    sigma: float = 0.1,
    lambda_baseline: float = 1.0,
    lambda_policy: float = 1.0,
):
    """Weighted sum of :func:`policy_surrogate` and :func:`baseline_loss`.

    The baseline gradient is blocked from the shared LSTM, so this total is
    a descent direction for each part, not the gradient of the sum.
    """
    lp, gp = policy_surrogate(params, traj, advantages, sigma)
    lb, gb = baseline_loss(params, traj)
    grads = {k: lambda_policy * g for k, g in gp.items()}
    grads.update({k: lambda_baseline * g for k, g in gb.items()})
    return lambda_policy * lp + lambda_baseline * lb, grads


def _split(d):
    pol = {k: v for k, v in d.items() if not k.startswith("baseline.")}
    base = {k: v for k, v in d.items() if k.startswith("baseline.")}
    return pol, base


def policy_gradient_step(
    model: LocModel,
    traj: Trajectory,
    opt: tuple[AdamState, AdamState] | None = None,
    lr: float = 5e-4,
    weight_decay: float = 5e-4,
    sigma: float = 0.1,
    lambda_baseline: float = 1.0,
    lambda_policy: float = 1.0,
    clip_norm: float | None = 5.0,
    baseline_lr: float | None = None,
):
    """Apply one update from a batch of rollouts. Returns ``(model, opt, stats)``.

    The policy (LSTM + policy head) and the baseline head are separate
    parameter groups: each is clipped to ``clip_norm`` on its own and has its
    own Adam state, and the baseline may use a different learning rate.
    """
    params = model.params()
    loss, grads = pg_loss_and_grad(params, traj, None, sigma, lambda_baseline, lambda_policy)
    if not math.isfinite(loss):
        raise NumericError(f"policy surrogate became {loss}")
    opt_pol, opt_base = opt or (AdamState(), AdamState())
    p_pol, p_base = _split(params)
    g_pol, g_base = _split(grads)
    if clip_norm is not None:
        g_pol, _ = clip_by_global_norm(g_pol, clip_norm)
        g_base, _ = clip_by_global_norm(g_base, clip_norm)
    p_pol, opt_pol = adam_update(p_pol, g_pol, opt_pol, lr, weight_decay)
    p_base, opt_base = adam_update(p_base, g_base, opt_base, baseline_lr or lr, weight_decay)
    err = traj.R - traj.v
    stats = {
        "mean_return": float(traj.R[0].mean()),
        "mean_reward": float(traj.r.sum(axis=0).mean()),
        "baseline_loss": float(0.5 * np.sum(err * err) / traj.s.shape[1]),
    }
    return model.with_params({**p_pol, **p_base}), (opt_pol, opt_base), stats


def window_pool(flag_sequences, length):
    pool = [(i, o) for i, f in enumerate(flag_sequences) for o in range(len(f) - length + 1)]
    if not pool:
        raise ValueError(f"no sequence is at least {length} chunks long")
    return np.array(pool, dtype=np.int64)


def gather_windows(score_sequences, flag_sequences, picks, length):
    scores = np.stack([score_sequences[i][o : o + length] for i, o in picks], axis=1)
    flags = np.stack([flag_sequences[i][o : o + length] for i, o in picks], axis=1)
    return scores, flags


def _sampler(flag_sequences, t_loc, balanced, weight):
    """Window drawer plus the imbalance weight, computed only when ``weight`` is None."""
    if balanced:
        sampler = BalancedSequenceSampler(flag_sequences, t_loc)
        return sampler.sample, sampler.imbalance_ratio() if weight is None else weight
    pool = window_pool(flag_sequences, t_loc)

    def draw(batch, rng):
        return pool[rng.integers(0, len(pool), batch)]

    return draw, imbalance_ratio(flag_sequences) if weight is None else weight


def train_locnet(
    model: LocModel,
    score_sequences,
    flag_sequences,
    t_loc: int = 16,
    batch: int = 32,
    iterations: int = 1000,
    gamma: float = 0.9,
    alpha: float | None = None,
    sigma: float = 0.1,
    lr: float = 5e-4,
    weight_decay: float = 5e-4,
    seed=0,
    balanced: bool = False,
    clip_norm: float | None = 5.0,
    baseline_lr: float | None = None,
    lambda_baseline: float = 1.0,
    lambda_policy: float = 1.0,
    callback=None,
):
    """Policy-gradient training on windows of ``t_loc`` chunks.

    Each iteration samples ``batch`` windows, rolls out the current policy,
    samples decisions, computes rewards and discounted returns, then takes
    one Adam step. ``alpha`` defaults to the negative/positive chunk ratio of
    the (possibly balanced) sample distribution.

    Returns ``(model, reward_curve)`` with the mean per-window reward sum of
    every iteration. ``callback(iteration, model, stats)``, if given, runs
    after every update.
    """
    draw, alpha = _sampler(flag_sequences, t_loc, balanced, alpha)
    opt = None
    curve = []
    for it in range(iterations):
        rng = np.random.default_rng([seed, it])
        picks = draw(batch, rng)
        scores, flags = gather_windows(score_sequences, flag_sequences, picks, t_loc)
        traj = rollout(model, scores, flags, alpha, gamma, sigma, rng)
        model, opt, stats = policy_gradient_step(
            model, traj, opt, lr, weight_decay, sigma, lambda_baseline, lambda_policy, clip_norm, baseline_lr
        )
        curve.append(stats["mean_reward"])
        if callback is not None:
            callback(it, model, stats)
        if (it + 1) % 100 == 0:
            log.info("locnet iter %d reward %.3f", it + 1, np.mean(curve[-100:]))
    return model, curve


def ce_loss_and_grad(params: dict, scores, flags, beta: float):
    """Weighted start cross-entropy ``-beta g log s - (1 - g) log(1 - s)``, mean per chunk.

    Runs the same closed loop as inference over ``(T, B, K)`` scores.
    Computed from log-softmax so saturated outputs stay finite. The baseline
    head is unused and receives zero gradient.
    """
    lstm = LstmParams.from_arrays(params, "lstm")
    policy = AffineHead.from_arrays(params, "policy")
    g = np.asarray(flags, dtype=np.float64)
    n = g.size
    hs, s, cache = closed_loop_forward(lstm, policy, scores)
    logp = log_softmax(policy(hs))
    w_start = beta * g
    w_other = 1.0 - g
    loss = -np.sum(w_start * logp[..., START] + w_other * logp[..., 1]) / n
    p = np.exp(logp)
    # d/dz of -w0 log p0 - w1 log p1 is (w0 + w1) p - w
    wsum = (w_start + w_other)[..., None]
    dlogits = (wsum * p - np.stack([w_start, w_other], axis=-1)) / n
    grads = closed_loop_backward(lstm, policy, cache, s, dlogits, np.shape(scores)[-1])
    grads["baseline.W"] = np.zeros_like(params["baseline.W"])
    grads["baseline.b"] = np.zeros_like(params["baseline.b"])
    return loss, grads


def train_locnet_ce(
    model: LocModel,
    score_sequences,
    flag_sequences,
    t_loc: int = 16,
    batch: int = 32,
    iterations: int = 1000,
    beta: float | None = None,
    lr: float = 5e-4,
    weight_decay: float = 5e-4,
    seed=0,
    balanced: bool = False,
    clip_norm: float | None = 5.0,
    callback=None,
):
    """Per-chunk weighted cross-entropy ablation; same windows and history feedback, no sampling.

    Returns ``(model, loss_curve)``; ``callback`` works as in :func:`train_locnet`.
    """
    draw, beta = _sampler(flag_sequences, t_loc, balanced, beta)
    opt = AdamState()
    curve = []
    for it in range(iterations):
        rng = np.random.default_rng([seed, it])
        picks = draw(batch, rng)
        scores, flags = gather_windows(score_sequences, flag_sequences, picks, t_loc)
        params = model.params()
        loss, grads = ce_loss_and_grad(params, scores, flags, beta)
        if not math.isfinite(loss):
            raise NumericError(f"start cross-entropy became {loss} at iteration {it}")
        if clip_norm is not None:
            grads, _ = clip_by_global_norm(grads, clip_norm)
        params, opt = adam_update(params, grads, opt, lr, weight_decay)
        model = model.with_params(params)
        curve.append(float(loss))
        if callback is not None:
            callback(it, model, {"loss": float(loss)})
    return model, curve
