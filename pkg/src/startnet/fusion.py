"""Late fusion of class scores with start probabilities, and online start generation."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .streams import STREAM_FORMAT_VERSION, StreamFormatError, parse_record


@dataclass(frozen=True)
class StartPrediction:
    time: int
    class_id: int
    confidence: float
    stream: str = ""


def fuse(p, s_start):
    """Per-class start scores: ``s * p[k]`` for actions, ``(1 - s) * p[0]`` for background.

    Works on a single ``(K,)`` vector with scalar ``s`` or on ``(T, K)``
    with ``(T,)`` start probabilities.
    """
    p = np.asarray(p, dtype=np.float64)
    s = np.asarray(s_start, dtype=np.float64)[..., None]
    out = s * p
    out[..., 0] = (1.0 - s[..., 0]) * p[..., 0]
    return out


def generate_starts(scores, threshold: float = 0.0, stream: str = "") -> list[StartPrediction]:
    """Emit a start at ``t`` when the argmax class is an action, differs from the
    argmax at ``t - 1`` (background before the first chunk), and its score
    exceeds ``threshold``.

    The previous class is always the previous argmax, whether or not a start
    was emitted there.
    """
    scores = np.asarray(scores, dtype=np.float64)
    preds = []
    prev = 0
    for t in range(len(scores)):
        c = int(np.argmax(scores[t]))
        if c != 0 and c != prev and scores[t, c] > threshold:
            preds.append(StartPrediction(t, c, float(scores[t, c]), stream))
        prev = c
    return preds


def clsnet_only_starts(scores, threshold: float = 0.0, stream: str = "") -> list[StartPrediction]:
    return generate_starts(scores, threshold, stream)


def save_predictions(preds, path, meta: dict | None = None) -> None:
    """JSONL with a header line, one ``{stream, t, class, confidence}`` record per start."""
    lines = [json.dumps({"version": STREAM_FORMAT_VERSION, "kind": "predictions", "length": len(preds), "meta": meta or {}}, sort_keys=True)]
    for p in preds:
        lines.append(json.dumps({"stream": p.stream, "t": p.time, "class": p.class_id, "confidence": p.confidence}, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def save_predictions_csv(preds, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stream", "t", "class", "confidence"])
        for p in preds:
            w.writerow([p.stream, p.time, p.class_id, repr(p.confidence)])


def load_predictions(path) -> list[StartPrediction]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise StreamFormatError(f"{path}:1: empty file, missing header")
    header = parse_record(lines[0], 1, path)
    if header.get("version") != STREAM_FORMAT_VERSION or header.get("kind") != "predictions":
        raise StreamFormatError(f"{path}:1: not a version {STREAM_FORMAT_VERSION} predictions file")
    preds = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        rec = parse_record(line, lineno, path)
        try:
            preds.append(StartPrediction(int(rec["t"]), int(rec["class"]), float(rec["confidence"]), str(rec.get("stream", ""))))
        except KeyError as e:
            raise StreamFormatError(f"{path}:{lineno}: missing field {e.args[0]}") from None
    if len(preds) != header.get("length", len(preds)):
        raise StreamFormatError(f"{path}: header says {header['length']} predictions, found {len(preds)}")
    return preds
