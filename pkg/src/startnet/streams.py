"""Chunk streams: labels, start flags, synthetic generation, JSONL I/O, sampling."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STREAM_FORMAT_VERSION = 1


class StreamFormatError(ValueError):
    pass


def derive_start_labels(labels) -> np.ndarray:
    """1 at the first chunk of every maximal non-background run, else 0.

    A change between two action classes with no background in between counts
    as a new start.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return np.zeros(0, dtype=np.int64)
    prev = np.concatenate([[0], labels[:-1]])
    return ((labels != 0) & (labels != prev)).astype(np.int64)


@dataclass(frozen=True)
class GroundTruthStart:
    time: int
    class_id: int
    stream: str = ""

    def __post_init__(self):
        if self.class_id == 0:
            raise ValueError("a ground-truth start cannot be background")


@dataclass(frozen=True, eq=False)
class ChunkStream:
    features: np.ndarray  # (T, feature_dim)
    labels: np.ndarray  # (T,)
    num_classes: int
    start_flags: np.ndarray | None = None
    chunks_per_second: float = 4.0
    name: str = ""

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D (chunks x dim), got shape {feats.shape}")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (feats.shape[0],):
            raise ValueError(f"labels has {labels.size} entries but features has {feats.shape[0]} chunks")
        if self.num_classes < 2:
            raise ValueError("need at least background plus one action class")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes - 1}]")
        derived = derive_start_labels(labels)
        if self.start_flags is None:
            flags = derived
        else:
            flags = np.asarray(self.start_flags, dtype=np.int64)
            if flags.shape != labels.shape:
                raise ValueError(f"start_flags has {flags.size} entries but labels has {labels.size}")
            if not np.array_equal(flags, derived):
                raise ValueError("start_flags disagree with the starts implied by labels")
        if self.chunks_per_second <= 0:
            raise ValueError("chunks_per_second must be positive")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "start_flags", flags)
        for a in (feats, labels, flags):
            a.flags.writeable = False

    def __len__(self):
        return self.labels.size

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def ground_truth(self) -> list[GroundTruthStart]:
        return [GroundTruthStart(int(t), int(self.labels[t]), self.name) for t in np.flatnonzero(self.start_flags)]

    def __eq__(self, other):
        if not isinstance(other, ChunkStream):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.chunks_per_second == other.chunks_per_second
            and self.name == other.name
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass
class SyntheticConfig:
    """Alternating background gaps and action segments with Gaussian features.

    Class 0 is background. When ``class_means`` is omitted, a fixed set of
    well-separated means is drawn with ``means_seed`` and scaled to norm
    ``mean_scale``.
    """

    num_classes: int = 4
    feature_dim: int = 8
    stream_length: int = 400
    mean_segment: float = 20.0
    mean_gap: float = 40.0
    noise_std: float = 1.0
    blur: int = 3
    mean_scale: float = 2.0
    means_seed: int = 0
    class_means: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.feature_dim < 1 or self.stream_length < 1:
            raise ValueError("feature_dim and stream_length must be positive")
        if self.mean_segment < 1 or self.mean_gap < 1:
            raise ValueError("mean segment and gap lengths must be >= 1 chunk")
        if self.noise_std < 0 or self.blur < 0:
            raise ValueError("noise_std and blur must be non-negative")
        if self.class_means is None:
            rng = np.random.default_rng(self.means_seed)
            means = rng.standard_normal((self.num_classes, self.feature_dim))
            means *= self.mean_scale / np.linalg.norm(means, axis=1, keepdims=True)
            self.class_means = means
        else:
            self.class_means = np.asarray(self.class_means, dtype=np.float64)
            if self.class_means.shape != (self.num_classes, self.feature_dim):
                raise ValueError(
                    f"class_means has shape {self.class_means.shape}, "
                    f"expected {(self.num_classes, self.feature_dim)}"
                )


def _segment_labels(config: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    labels = np.zeros(config.stream_length, dtype=np.int64)
    t = 0
    while t < config.stream_length:
        t += rng.geometric(1.0 / config.mean_gap)
        if t >= config.stream_length:
            break
        length = rng.geometric(1.0 / config.mean_segment)
        labels[t : t + length] = rng.integers(1, config.num_classes)
        t += length
    return labels


def generate_stream(config: SyntheticConfig, seed, name: str = "") -> ChunkStream:
    rng = np.random.default_rng(seed)
    labels = _segment_labels(config, rng)
    means = config.class_means[labels].copy()
    bg = config.class_means[0]
    if config.blur:
        weights = np.arange(1, config.blur + 1) / (config.blur + 1)
        for t in np.flatnonzero(derive_start_labels(labels)):
            k = labels[t]
            for j, w in enumerate(weights):
                if t + j >= labels.size or labels[t + j] != k:
                    break
                means[t + j] = bg + w * (config.class_means[k] - bg)
    features = means + config.noise_std * rng.standard_normal(means.shape)
    return ChunkStream(features, labels, config.num_classes, name=name)


def generate_corpus(config: SyntheticConfig, count: int, seed: int, prefix: str = "stream") -> list[ChunkStream]:
    seeds = np.random.SeedSequence(seed).spawn(count)
    return [generate_stream(config, s, name=f"{prefix}_{i:04d}") for i, s in enumerate(seeds)]


def imbalance_ratio(flag_sequences) -> float:
    """Negatives over positives across all start-flag sequences."""
    flags = np.concatenate([np.asarray(f).ravel() for f in flag_sequences]) if flag_sequences else np.zeros(0)
    pos = int(np.count_nonzero(flags))
    if pos == 0:
        raise ValueError("no positive start flags; the imbalance ratio is undefined")
    return (flags.size - pos) / pos


class BalancedSequenceSampler:
    """Draws windows of ``length`` chunks, half containing a start and half not.

    Every window offset with the given ``stride`` forms the candidate pool.
    """

    def __init__(self, flag_sequences, length: int, stride: int = 1):
        self.length = length
        self.flag_sequences = [np.asarray(f) for f in flag_sequences]
        pos, neg = [], []
        for s, flags in enumerate(self.flag_sequences):
            if flags.size < length:
                continue
            csum = np.concatenate([[0], np.cumsum(flags)])
            for off in range(0, flags.size - length + 1, stride):
                (pos if csum[off + length] > csum[off] else neg).append((s, off))
        self.positive = np.array(pos, dtype=np.int64).reshape(-1, 2)
        self.negative = np.array(neg, dtype=np.int64).reshape(-1, 2)

    def sample(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        """``(batch, 2)`` array of (sequence index, offset); positives first."""
        if batch % 2:
            raise ValueError("balanced batches need an even batch size")
        if not len(self.positive) or not len(self.negative):
            which = "positive" if not len(self.positive) else "negative"
            raise ValueError(f"no {which} windows of length {self.length}; disable balanced sampling")
        half = batch // 2
        p = self.positive[rng.integers(0, len(self.positive), half)]
        n = self.negative[rng.integers(0, len(self.negative), half)]
        return np.concatenate([p, n])

    def imbalance_ratio(self) -> float:
        """Ratio of negative to positive chunks when positive and negative windows are drawn equally."""
        if not len(self.positive):
            raise ValueError("no positive windows; the imbalance ratio is undefined")
        starts = np.mean([self.flag_sequences[s][o : o + self.length].sum() for s, o in self.positive])
        return (2 * self.length - starts) / starts


def balanced_sequence_sampler(flag_sequences, length: int, batch: int, seed, stride: int = 1):
    """Yield balanced batches of window indices forever."""
    sampler = BalancedSequenceSampler(flag_sequences, length, stride)
    rng = np.random.default_rng(seed)
    while True:
        yield sampler.sample(batch, rng)


def _dump(record) -> str:
    return json.dumps(record, separators=(",", ":"))


def save_stream(stream: ChunkStream, path, meta: dict | None = None) -> None:
    header = {
        "version": STREAM_FORMAT_VERSION,
        "K": stream.num_classes,
        "feature_dim": stream.feature_dim,
        "chunks_per_second": stream.chunks_per_second,
        "length": len(stream),
        "name": stream.name,
    }
    if meta:
        header["meta"] = meta
    lines = [_dump(header)]
    for t in range(len(stream)):
        lines.append(
            _dump(
                {
                    "t": t,
                    "f": stream.features[t].tolist(),
                    "y": int(stream.labels[t]),
                    "g": int(stream.start_flags[t]),
                }
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def parse_record(line: str, lineno: int, path):
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise StreamFormatError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
    if not isinstance(rec, dict):
        raise StreamFormatError(f"{path}:{lineno}: expected a JSON object")
    return rec


def read_jsonl_records(path, required: tuple[str, ...]):
    """Header plus body records of a versioned JSONL file, with line-numbered errors."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise StreamFormatError(f"{path}:1: empty file, missing header")
    header = parse_record(lines[0], 1, path)
    if header.get("version") != STREAM_FORMAT_VERSION:
        raise StreamFormatError(f"{path}:1: unsupported format version {header.get('version')!r}")
    body = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        rec = parse_record(line, lineno, path)
        missing = [k for k in required if k not in rec]
        if missing:
            raise StreamFormatError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
        if "t" in rec and rec["t"] != len(body):
            raise StreamFormatError(f"{path}:{lineno}: field t={rec['t']} out of sequence, expected {len(body)}")
        body.append((lineno, rec))
    if "length" in header and len(body) != header["length"]:
        raise StreamFormatError(f"{path}: truncated or padded file, header says {header['length']} records, found {len(body)}")
    return header, body


def load_stream(path) -> ChunkStream:
    header, body = read_jsonl_records(path, ("t", "f", "y", "g"))
    for key in ("K", "feature_dim", "chunks_per_second"):
        if key not in header:
            raise StreamFormatError(f"{path}:1: header missing field {key}")
    dim = header["feature_dim"]
    feats = np.empty((len(body), dim))
    labels = np.empty(len(body), dtype=np.int64)
    flags = np.empty(len(body), dtype=np.int64)
    for i, (lineno, rec) in enumerate(body):
        if len(rec["f"]) != dim:
            raise StreamFormatError(f"{path}:{lineno}: field f has length {len(rec['f'])}, header feature_dim is {dim}")
        feats[i] = rec["f"]
        labels[i] = rec["y"]
        flags[i] = rec["g"]
    try:
        return ChunkStream(
            feats, labels, header["K"], flags, header["chunks_per_second"], name=header.get("name", "")
        )
    except ValueError as e:
        raise StreamFormatError(f"{path}: {e}") from None
