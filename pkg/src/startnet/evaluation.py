"""Point-level average precision for online action-start detection.

Per class, predictions are ranked by confidence (ties: earlier time first)
and greedily assigned to the nearest still-unmatched ground-truth start of
the same stream within the offset tolerance; ties between equidistant
ground truths go to the earlier one. Everything else is a false positive.

AP at recall depth ``X`` averages the precision at the first
``ceil(X * num_gt)`` true positives and divides by that count, so ``X = 1``
is the usual non-interpolated AP.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_OFFSETS = tuple(float(s) for s in range(1, 11))
DEFAULT_DEPTHS = tuple(round(0.1 * i, 1) for i in range(1, 11))
REPORT_VERSION = 1


@dataclass
class MatchResult:
    order: list[int]  # prediction indices by rank
    tp: np.ndarray  # bool per rank
    gt_match: list[int | None]  # rank of the prediction matched to each GT
    num_gt: int

    @property
    def num_tp(self) -> int:
        return int(self.tp.sum())


def rank_order(preds) -> list[int]:
    return sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, preds[i].time, preds[i].stream))


def match(preds, gts, offset_chunks: int, strict: bool = False) -> MatchResult:
    """Greedy duplicate-free matching for one class.

    ``strict`` requires distance < offset instead of <= offset.
    """
    if offset_chunks < 0:
        raise ValueError("offset must be non-negative")
    order = rank_order(preds)
    by_stream: dict[str, list[int]] = {}
    for j, g in enumerate(gts):
        by_stream.setdefault(g.stream, []).append(j)
    for idx in by_stream.values():
        idx.sort(key=lambda j: gts[j].time)
    taken = [None] * len(gts)
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        p = preds[i]
        best, best_dist = None, None
        for j in by_stream.get(p.stream, ()):
            if taken[j] is not None:
                continue
            dist = abs(p.time - gts[j].time)
            if dist > offset_chunks or (strict and dist == offset_chunks):
                continue
            # GTs are visited in time order, so strict < keeps the earlier one on ties
            if best is None or dist < best_dist:
                best, best_dist = j, dist
        if best is not None:
            taken[best] = rank
            tp[rank] = True
    return MatchResult(order, tp, taken, len(gts))


def depth_count(num_gt: int, depth: float) -> int:
    if not 0 < depth <= 1:
        raise ValueError("recall depth must lie in (0, 1]")
    # guard against 0.3 * 10 = 3.0000000000000004
    return max(1, math.ceil(depth * num_gt - 1e-9))


def p_ap(tp_flags, num_gt: int, depth: float = 1.0) -> float:
    """AP over ranked TP/FP flags, truncated at recall depth ``depth``."""
    if num_gt < 1:
        raise ValueError("p-AP needs at least one ground-truth start")
    n = depth_count(num_gt, depth)
    tp = np.asarray(tp_flags, dtype=bool)
    if not tp.any():
        return 0.0
    cum = np.cumsum(tp)
    ranks = np.flatnonzero(tp)[:n]
    precision = cum[ranks] / (ranks + 1)
    return float(precision.sum() / n)


@dataclass
class EvalReport:
    classes: list[int]
    offsets_seconds: list[float]
    offsets_chunks: list[int]
    depths: list[float]
    ap: np.ndarray  # (classes, offsets, depths)
    counts: dict[int, dict[str, int]]
    meta: dict = field(default_factory=dict)

    @property
    def pmap(self) -> np.ndarray:
        """``(offsets, depths)`` mean over classes."""
        return self.ap.mean(axis=0)

    @property
    def average_pmap(self) -> np.ndarray:
        """Per-depth p-mAP averaged over the offsets."""
        return self.pmap.mean(axis=0)

    def value(self, offset_seconds: float, depth: float = 1.0) -> float:
        i = self.offsets_seconds.index(offset_seconds)
        j = self.depths.index(depth)
        return float(self.pmap[i, j])

    def monotone_in_offset(self) -> bool:
        """Per-class p-AP never drops as the offset grows (offsets taken in ascending order)."""
        order = np.argsort(self.offsets_chunks, kind="stable")
        ap = self.ap[:, order, :]
        return bool(np.all(np.diff(ap, axis=1) >= -1e-12))

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "meta": self.meta,
            "classes": self.classes,
            "offsets_seconds": self.offsets_seconds,
            "offsets_chunks": self.offsets_chunks,
            "depths": self.depths,
            "counts": {str(k): v for k, v in self.counts.items()},
            "per_class_ap": {str(c): self.ap[i].tolist() for i, c in enumerate(self.classes)},
            "pmap": self.pmap.tolist(),
            "average_pmap": self.average_pmap.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict):
        if doc.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {doc.get('version')!r}")
        classes = [int(c) for c in doc["classes"]]
        return cls(
            classes,
            list(doc["offsets_seconds"]),
            list(doc["offsets_chunks"]),
            list(doc["depths"]),
            np.array([doc["per_class_ap"][str(c)] for c in classes]),
            {int(k): v for k, v in doc["counts"].items()},
            doc.get("meta", {}),
        )

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["offset_s"] + [f"rec@{d:g}" for d in self.depths])
        for off, row in zip(self.offsets_seconds, self.pmap):
            w.writerow([f"{off:g}"] + [f"{v:.6f}" for v in row])
        w.writerow(["average"] + [f"{v:.6f}" for v in self.average_pmap])
        return buf.getvalue()

    def save_csv(self, path):
        Path(path).write_text(self.to_csv())


def evaluate(
    preds,
    gts,
    offsets_seconds=DEFAULT_OFFSETS,
    chunks_per_second: float = 4.0,
    depths=DEFAULT_DEPTHS,
    strict: bool = False,
) -> EvalReport:
    """p-AP for every class with at least one ground truth, offset and depth.

    Offsets convert to chunks by ``floor(seconds * chunks_per_second)``.
    """
    offsets_seconds = [float(o) for o in offsets_seconds]
    depths = [float(d) for d in depths]
    classes = sorted({g.class_id for g in gts})
    if not classes:
        raise ValueError("no ground-truth starts: p-mAP is undefined")
    offsets_chunks = [math.floor(o * chunks_per_second + 1e-9) for o in offsets_seconds]
    ap = np.zeros((len(classes), len(offsets_chunks), len(depths)))
    counts = {}
    for ci, c in enumerate(classes):
        cp = [p for p in preds if p.class_id == c]
        cg = [g for g in gts if g.class_id == c]
        counts[c] = {"num_gt": len(cg), "num_pred": len(cp)}
        for oi, off in enumerate(offsets_chunks):
            m = match(cp, cg, off, strict)
            for di, d in enumerate(depths):
                ap[ci, oi, di] = p_ap(m.tp, len(cg), d)
    meta = {
        "chunks_per_second": chunks_per_second,
        "offset_rule": "floor(seconds * chunks_per_second), distance " + ("<" if strict else "<="),
        "depth_rule": "mean precision over the first ceil(depth * num_gt) true positives",
        "tie_rules": "rank by confidence desc then time asc; equidistant GTs go to the earlier one",
    }
    return EvalReport(classes, offsets_seconds, offsets_chunks, depths, ap, counts, meta)


def compare_reports(reports: dict, offsets=None, depths=None) -> str:
    """CSV with one row per named report and one column per (offset, depth)."""
    if not reports:
        raise ValueError("nothing to compare")
    first = next(iter(reports.values()))
    offsets = list(first.offsets_seconds if offsets is None else offsets)
    depths = list(first.depths if depths is None else depths)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant"] + [f"{o:g}s@rec{d:g}" for o in offsets for d in depths])
    for name, rep in reports.items():
        w.writerow([name] + [f"{rep.value(o, d):.6f}" for o in offsets for d in depths])
    return buf.getvalue()
