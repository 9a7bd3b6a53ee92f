"""Two-stage detection over whole streams and the desk-scale synthetic benchmark."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .clsnet import ClsModel, cls_infer_stream, frame_accuracy, train_clsnet
from .evaluation import DEFAULT_DEPTHS, DEFAULT_OFFSETS, EvalReport, evaluate
from .fusion import clsnet_only_starts, fuse, generate_starts
from .locnet import LocModel, gather_windows, loc_infer_stream, rollout, train_locnet, train_locnet_ce, window_pool
from .streams import SyntheticConfig, generate_corpus, imbalance_ratio

log = logging.getLogger(__name__)

VARIANTS = ("startnet-pg", "startnet-ce", "clsnet-only")


def detect_stream(cls_model: ClsModel, loc_model: LocModel | None, stream, threshold: float = 0.0):
    """Start predictions for one stream; ``loc_model=None`` gives the classifier-only variant."""
    scores = cls_infer_stream(cls_model, stream)
    name = getattr(stream, "name", "")
    if loc_model is None:
        return clsnet_only_starts(scores, threshold, name)
    s = loc_infer_stream(loc_model, scores)
    return generate_starts(fuse(scores, s), threshold, name)


def detect_corpus(cls_model, loc_model, streams, threshold: float = 0.0):
    preds = []
    for s in streams:
        preds.extend(detect_stream(cls_model, loc_model, s, threshold))
    return preds


def ground_truth(streams):
    return [g for s in streams for g in s.ground_truth()]


def pmap_at(loc_model, score_sequences, names, gts, offset: float = 1.0, depth: float = 1.0, cps: float = 4.0):
    """p-mAP of fused detections at a single offset and depth."""
    preds = []
    for sc, name in zip(score_sequences, names):
        if loc_model is None:
            preds.extend(clsnet_only_starts(sc, 0.0, name))
        else:
            preds.extend(generate_starts(fuse(sc, loc_infer_stream(loc_model, sc)), 0.0, name))
    return evaluate(preds, gts, [offset], cps, [depth]).value(offset, depth)


class ValidationSelector:
    """Training callback that keeps the localizer with the best validation p-mAP.

    Every ``every`` iterations (and at ``last``, if given) the current model is
    scored on held-out streams; ties keep the earlier model.
    """

    def __init__(self, val_scores, val_streams, every: int, last: int | None = None, offset=1.0, depth=1.0):
        if every < 1:
            raise ValueError("selection interval must be >= 1")
        self.scores = list(val_scores)
        self.names = [s.name for s in val_streams]
        self.gts = ground_truth(val_streams)
        self.cps = val_streams[0].chunks_per_second if val_streams else 4.0
        self.every, self.last = every, last
        self.offset, self.depth = offset, depth
        self.best_model, self.best_score, self.best_iteration = None, -1.0, -1
        self.history = []

    def __call__(self, it, model, stats=None):
        done = it + 1
        if done % self.every and done != self.last:
            return
        score = pmap_at(model, self.scores, self.names, self.gts, self.offset, self.depth, self.cps)
        self.history.append((done, score))
        if score > self.best_score:
            self.best_model, self.best_score, self.best_iteration = model, score, done


@dataclass
class BenchmarkConfig:
    """Desk-scale stand-in for the real datasets; see README for the frozen values.

    Both localizers are trained for a fixed budget and the checkpoint with the
    best validation p-mAP (1 s offset, depth 1.0) is kept, scored every
    ``select_every`` iterations on a held-out split.
    """

    seed: int = 20190611
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    train_streams: int = 200
    val_streams: int = 30
    test_streams: int = 50
    cls_hidden: int = 64
    cls_seq_len: int = 64
    cls_batch: int = 32
    cls_epochs: int = 8
    cls_lr: float = 5e-3
    loc_hidden: int = 128
    history: int = 8
    t_loc: int = 16
    loc_batch: int = 32
    pg_iterations: int = 1000
    pg_lr: float = 1e-4
    baseline_lr: float = 1e-2
    ce_iterations: int = 800
    ce_lr: float = 2e-3
    select_every: int = 50
    gamma: float = 0.9
    sigma: float = 0.1
    weight_decay: float = 5e-4
    balanced: bool = False


@dataclass
class BenchmarkResult:
    cls_accuracy: float
    reports: dict  # variant name -> EvalReport
    reward_curves: dict
    selection: dict  # variant name -> (best iteration, best validation p-mAP, history)
    untrained_reward: float
    trained_reward: float
    alpha: float
    seconds: float

    def pmap(self, variant: str, offset: float = 1.0, depth: float = 1.0) -> float:
        return self.reports[variant].value(offset, depth)


def mean_window_reward(model: LocModel, score_sequences, flag_sequences, alpha, t_loc, batch, gamma, sigma, seed, draws=20):
    """Average summed reward per window under the sampling policy (evaluation only)."""
    pool = window_pool(flag_sequences, t_loc)
    total = 0.0
    for k in range(draws):
        rng = np.random.default_rng([seed, 10_000 + k])
        picks = pool[rng.integers(0, len(pool), batch)]
        scores, flags = gather_windows(score_sequences, flag_sequences, picks, t_loc)
        traj = rollout(model, scores, flags, alpha, gamma, sigma, rng)
        total += traj.r.sum(axis=0).mean()
    return total / draws


def benchmark_seeds(seed: int) -> dict:
    roles = ("train", "val", "test", "clsnet", "locnet")
    return {r: int(c.generate_state(1)[0]) for r, c in zip(roles, np.random.SeedSequence(seed).spawn(len(roles)))}


def run_benchmark(cfg: BenchmarkConfig | None = None, histories=(None,), variants=VARIANTS) -> BenchmarkResult:
    """Generate data, train both stages and evaluate every requested variant on the test split.

    ``histories`` lists history lengths for the policy-gradient localizer;
    ``None`` means ``cfg.history``. Runs with other lengths are reported as
    ``startnet-pg@n<k>``.
    """
    cfg = cfg or BenchmarkConfig()
    t0 = time.perf_counter()
    seeds = benchmark_seeds(cfg.seed)
    train = generate_corpus(cfg.data, cfg.train_streams, seeds["train"], "train")
    val = generate_corpus(cfg.data, cfg.val_streams, seeds["val"], "val")
    test = generate_corpus(cfg.data, cfg.test_streams, seeds["test"], "test")
    K, D = cfg.data.num_classes, cfg.data.feature_dim

    cls_model = ClsModel.init(D, K, cfg.cls_hidden, seed=seeds["clsnet"])
    cls_model, _ = train_clsnet(
        cls_model, train, cfg.cls_seq_len, cfg.cls_batch, cfg.cls_epochs, cfg.cls_lr, cfg.weight_decay, seed=seeds["clsnet"]
    )
    acc = frame_accuracy(cls_model, test)
    log.info("clsnet test frame accuracy %.4f", acc)

    train_scores = [cls_infer_stream(cls_model, s) for s in train]
    val_scores = [cls_infer_stream(cls_model, s) for s in val]
    test_scores = [cls_infer_stream(cls_model, s) for s in test]
    train_flags = [s.start_flags for s in train]
    alpha = imbalance_ratio(train_flags)
    gts = ground_truth(test)

    def report_for(loc):
        preds = []
        for s, sc in zip(test, test_scores):
            if loc is None:
                preds.extend(clsnet_only_starts(sc, 0.0, s.name))
            else:
                preds.extend(generate_starts(fuse(sc, loc_infer_stream(loc, sc)), 0.0, s.name))
        return evaluate(preds, gts, DEFAULT_OFFSETS, test[0].chunks_per_second, DEFAULT_DEPTHS)

    reports, curves, selection = {}, {}, {}
    untrained = trained = float("nan")
    if "clsnet-only" in variants:
        reports["clsnet-only"] = report_for(None)
    common = dict(t_loc=cfg.t_loc, batch=cfg.loc_batch, weight_decay=cfg.weight_decay, seed=seeds["locnet"],
                  balanced=cfg.balanced)
    if "startnet-pg" in variants:
        for n in histories:
            n = cfg.history if n is None else n
            name = "startnet-pg" if n == cfg.history else f"startnet-pg@n{n}"
            loc = LocModel.init(K, n, cfg.loc_hidden, seed=seeds["locnet"])
            eval_args = (train_scores, train_flags, alpha, cfg.t_loc, cfg.loc_batch, cfg.gamma, cfg.sigma, seeds["locnet"])
            before = mean_window_reward(loc, *eval_args)
            pick = ValidationSelector(val_scores, val, cfg.select_every, cfg.pg_iterations)
            _, curve = train_locnet(loc, train_scores, train_flags, iterations=cfg.pg_iterations, lr=cfg.pg_lr,
                                    gamma=cfg.gamma, sigma=cfg.sigma, baseline_lr=cfg.baseline_lr, callback=pick, **common)
            reports[name] = report_for(pick.best_model)
            curves[name] = curve
            selection[name] = (pick.best_iteration, pick.best_score, pick.history)
            log.info("%s: kept iteration %d (val p-mAP %.4f)", name, pick.best_iteration, pick.best_score)
            if n == cfg.history:
                untrained, trained = before, mean_window_reward(pick.best_model, *eval_args)
    if "startnet-ce" in variants:
        loc = LocModel.init(K, cfg.history, cfg.loc_hidden, seed=seeds["locnet"])
        pick = ValidationSelector(val_scores, val, cfg.select_every, cfg.ce_iterations)
        _, curve = train_locnet_ce(loc, train_scores, train_flags, iterations=cfg.ce_iterations, lr=cfg.ce_lr,
                                   callback=pick, **common)
        reports["startnet-ce"] = report_for(pick.best_model)
        curves["startnet-ce"] = curve
        selection["startnet-ce"] = (pick.best_iteration, pick.best_score, pick.history)
    return BenchmarkResult(acc, reports, curves, selection, untrained, trained, alpha, time.perf_counter() - t0)
