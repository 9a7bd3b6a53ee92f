"""Command-line front end: ``startnet {gen,train-cls,train-loc,detect,eval,report}``.

Settings come from defaults, then an optional flat ``key = value`` config
file, then command-line flags, later sources winning. Every output embeds
the resolved configuration and the package version, and reruns with the
same configuration produce byte-identical files.

Exit codes: 0 success, 2 invalid input or configuration, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .clsnet import ClsModel, cls_infer_stream, frame_accuracy, save_scores, train_clsnet
from .evaluation import EvalReport, compare_reports, evaluate
from .fusion import clsnet_only_starts, fuse, generate_starts, load_predictions, save_predictions
from .locnet import LocModel, loc_infer_stream, save_start_probs, train_locnet, train_locnet_ce
from .pipeline import VARIANTS, ValidationSelector, ground_truth
from .recurrent import NumericError
from .streams import (
    BalancedSequenceSampler,
    StreamFormatError,
    SyntheticConfig,
    generate_corpus,
    imbalance_ratio,
    load_stream,
    save_stream,
)

log = logging.getLogger("startnet")

DATA_ROOT_ENV = "STARTNET_DATA_ROOT"
SPLITS = ("train", "val", "test")
EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # paths
    data_root: str = "data"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"
    # data
    seed: int = 0
    num_classes: int = 4
    feature_dim: int = 8
    stream_length: int = 400
    mean_segment: float = 20.0
    mean_gap: float = 40.0
    noise_std: float = 1.0
    blur: int = 3
    mean_scale: float = 2.0
    chunks_per_second: float = 4.0
    train_streams: int = 200
    val_streams: int = 30
    test_streams: int = 50
    # classifier
    cls_hidden: int = 64
    seq_len: int = 64
    cls_batch: int = 32
    cls_epochs: int = 8
    cls_lr: float = 5e-3
    # localizer
    variant: str = "startnet-pg"
    loc_hidden: int = 128
    history: int = 8
    t_loc: int = 16
    loc_batch: int = 32
    loc_iterations: int = 1000
    loc_lr: float = 1e-4
    baseline_lr: float = 1e-2  # 0 means "same as loc_lr"
    ce_lr: float = 2e-3
    select_every: int = 50  # keep the best validation checkpoint; 0 keeps the last
    gamma: float = 0.9
    sigma: float = 0.1
    lambda_policy: float = 1.0
    lambda_baseline: float = 1.0
    balanced: bool = False
    # shared optimisation
    weight_decay: float = 5e-4
    clip_norm: float = 5.0
    # detection and evaluation
    threshold: float = 0.0
    offsets: tuple = tuple(float(s) for s in range(1, 11))
    depths: tuple = tuple(round(0.1 * i, 1) for i in range(1, 11))
    strict: bool = False

    def validate(self) -> "ExperimentConfig":
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        for name in ("num_classes", "feature_dim", "stream_length", "cls_hidden", "seq_len", "cls_batch",
                     "loc_hidden", "t_loc", "loc_batch"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        need(self.num_classes >= 2, "num_classes must be >= 2 (background plus actions)")
        for name in ("train_streams", "val_streams", "test_streams", "cls_epochs", "loc_iterations", "history", "blur",
                     "select_every"):
            need(getattr(self, name) >= 0, f"{name} must be >= 0")
        need(self.mean_segment >= 1 and self.mean_gap >= 1, "mean_segment and mean_gap must be >= 1")
        need(self.noise_std >= 0, "noise_std must be >= 0")
        need(self.chunks_per_second > 0, "chunks_per_second must be positive")
        for name in ("cls_lr", "loc_lr", "ce_lr", "sigma", "clip_norm"):
            need(getattr(self, name) > 0, f"{name} must be positive")
        for name in ("baseline_lr", "weight_decay", "lambda_policy", "lambda_baseline"):
            need(getattr(self, name) >= 0, f"{name} must be >= 0")
        need(0 <= self.gamma <= 1, "gamma must lie in [0, 1]")
        need(0 <= self.threshold < 1, "threshold must lie in [0, 1)")
        need(self.variant in VARIANTS, f"variant must be one of {', '.join(VARIANTS)}")
        need(len(self.offsets) > 0 and all(o >= 0 for o in self.offsets), "offsets must be a non-empty list of seconds >= 0")
        need(len(self.depths) > 0 and all(0 < d <= 1 for d in self.depths), "depths must lie in (0, 1]")
        need(not self.balanced or self.loc_batch % 2 == 0, "balanced sampling needs an even loc_batch")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["offsets"] = list(self.offsets)
        d["depths"] = list(self.depths)
        return d

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(
            self.num_classes, self.feature_dim, self.stream_length, self.mean_segment, self.mean_gap,
            self.noise_std, self.blur, self.mean_scale, means_seed=self.seed,
        )


FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    kind = type(FIELDS[name].default)
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError
            return low in ("1", "true", "yes", "on")
        if kind is tuple:
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve_config(file_values: dict, flag_values: dict, env=os.environ) -> ExperimentConfig:
    values = {}
    if env.get(DATA_ROOT_ENV):
        values["data_root"] = env[DATA_ROOT_ENV]
    values.update(file_values)
    values.update(flag_values)
    return ExperimentConfig(**values).validate()


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _csv_with_header(cfg: ExperimentConfig, header, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# startnet {__version__} config={_json_line(cfg.to_dict())}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _stamp(cfg: ExperimentConfig, **extra) -> dict:
    return {"startnet_version": __version__, "config": cfg.to_dict(), **extra}


def _mkdir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create directory {path}: {e.strerror}") from None
    return path


def _split_streams(cfg: ExperimentConfig, split: str):
    folder = Path(cfg.data_root) / split
    files = sorted(folder.glob("*.jsonl"))
    if not files:
        raise ConfigError(f"no stream files in {folder}; run `startnet gen` first")
    return [load_stream(f) for f in files]


ROLES = SPLITS + ("clsnet", "locnet")


def _seeds(seed: int) -> dict:
    # independent generator streams for every split and model
    children = np.random.SeedSequence(seed).spawn(len(ROLES))
    return {name: int(c.generate_state(1)[0]) for name, c in zip(ROLES, children)}


def _cls_path(cfg):
    return Path(cfg.checkpoint_dir) / "clsnet.json"


def _loc_path(cfg):
    return Path(cfg.checkpoint_dir) / f"locnet-{cfg.variant}.json"


def cmd_gen(cfg: ExperimentConfig, args) -> int:
    synth = cfg.synthetic()
    counts = {"train": cfg.train_streams, "val": cfg.val_streams, "test": cfg.test_streams}
    stamp = _stamp(cfg)
    manifest = {"startnet_version": __version__, "config": cfg.to_dict(), "splits": {}}
    seeds = _seeds(cfg.seed)
    for split in SPLITS:
        seed = seeds[split]
        folder = _mkdir(Path(cfg.data_root) / split)
        for old in folder.glob("*.jsonl"):
            old.unlink()
        streams = generate_corpus(synth, counts[split], seed, split)
        for s in streams:
            s = dataclasses.replace(s, chunks_per_second=cfg.chunks_per_second)
            save_stream(s, folder / f"{s.name}.jsonl", stamp)
        info = {"count": len(streams)}
        if streams and any(s.start_flags.any() for s in streams):
            info["alpha"] = imbalance_ratio([s.start_flags for s in streams])
            log.info("%s: %d streams, imbalance ratio %.4f", split, len(streams), info["alpha"])
        manifest["splits"][split] = info
    (Path(cfg.data_root) / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_train_cls(cfg: ExperimentConfig, args) -> int:
    train = _split_streams(cfg, "train")
    K, D = train[0].num_classes, train[0].feature_dim
    if K != cfg.num_classes:
        raise ConfigError(f"training streams have K={K} but num_classes={cfg.num_classes}")
    seed = _seeds(cfg.seed)["clsnet"]
    model = ClsModel.init(D, K, cfg.cls_hidden, seed=seed)
    model, curve = train_clsnet(model, train, cfg.seq_len, cfg.cls_batch, cfg.cls_epochs, cfg.cls_lr,
                                cfg.weight_decay, seed=seed, clip_norm=cfg.clip_norm)
    out = _mkdir(cfg.checkpoint_dir)
    meta = _stamp(cfg, loss_curve=curve)
    val_dir = Path(cfg.data_root) / "val"
    if any(val_dir.glob("*.jsonl")):
        meta["val_frame_accuracy"] = frame_accuracy(model, _split_streams(cfg, "val"))
        log.info("clsnet validation frame accuracy %.4f", meta["val_frame_accuracy"])
    model.save(_cls_path(cfg), meta)
    (out / "clsnet_loss.csv").write_text(_csv_with_header(cfg, ["epoch", "loss"], [[e, repr(v)] for e, v in enumerate(curve)]))
    return EXIT_OK


def _load_cls(cfg) -> ClsModel:
    path = _cls_path(cfg)
    if not path.exists():
        raise ConfigError(f"missing classifier checkpoint {path}; run `startnet train-cls` first")
    return ClsModel.load(path)[0]


def _load_loc(cfg) -> LocModel | None:
    if cfg.variant == "clsnet-only":
        return None
    path = _loc_path(cfg)
    if not path.exists():
        raise ConfigError(f"missing localizer checkpoint {path}; run `startnet train-loc` first")
    model = LocModel.load(path)[0]
    if model.history != cfg.history:
        raise ConfigError(f"{path} was trained with history={model.history}, config asks for {cfg.history}")
    return model


def cmd_train_loc(cfg: ExperimentConfig, args) -> int:
    if cfg.variant == "clsnet-only":
        raise ConfigError("variant clsnet-only has no localizer to train")
    cls_model = _load_cls(cfg)
    train = _split_streams(cfg, "train")
    scores = [cls_infer_stream(cls_model, s) for s in train]
    flags = [s.start_flags for s in train]
    seed = _seeds(cfg.seed)["locnet"]
    model = LocModel.init(cls_model.num_classes, cfg.history, cfg.loc_hidden, seed=seed)
    common = dict(t_loc=cfg.t_loc, batch=cfg.loc_batch, iterations=cfg.loc_iterations,
                  weight_decay=cfg.weight_decay, seed=seed, balanced=cfg.balanced, clip_norm=cfg.clip_norm)
    pick = None
    val_dir = Path(cfg.data_root) / "val"
    val = _split_streams(cfg, "val") if cfg.select_every and any(val_dir.glob("*.jsonl")) else []
    if val and not ground_truth(val):
        log.warning("validation split has no action starts; keeping the last checkpoint")
        val = []
    if val and cfg.loc_iterations:
        val_scores = [cls_infer_stream(cls_model, s) for s in val]
        pick = ValidationSelector(val_scores, val, cfg.select_every, cfg.loc_iterations)
        common["callback"] = pick
    try:
        ratio = BalancedSequenceSampler(flags, cfg.t_loc).imbalance_ratio() if cfg.balanced else imbalance_ratio(flags)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if cfg.variant == "startnet-pg":
        model, curve = train_locnet(model, scores, flags, lr=cfg.loc_lr, gamma=cfg.gamma, sigma=cfg.sigma,
                                    baseline_lr=cfg.baseline_lr or None, lambda_baseline=cfg.lambda_baseline,
                                    lambda_policy=cfg.lambda_policy, **common)
        column = "mean_window_reward"
    else:
        model, curve = train_locnet_ce(model, scores, flags, lr=cfg.ce_lr, **common)
        column = "loss"
    extra = {}
    if pick is not None and pick.best_model is not None:
        model = pick.best_model
        extra = {"selected_iteration": pick.best_iteration, "val_pmap": pick.best_score}
        log.info("kept iteration %d (validation p-mAP %.4f)", pick.best_iteration, pick.best_score)
    _mkdir(cfg.checkpoint_dir)
    model.save(_loc_path(cfg), _stamp(cfg, variant=cfg.variant, imbalance_ratio=ratio, **extra))
    rows = [[i, repr(float(v))] for i, v in enumerate(curve)]
    (Path(cfg.checkpoint_dir) / f"locnet-{cfg.variant}_curve.csv").write_text(_csv_with_header(cfg, ["iteration", column], rows))
    return EXIT_OK


def _detect_one(cfg, cls_model, loc_model, stream, dump_dir):
    scores = cls_infer_stream(cls_model, stream)
    if loc_model is None:
        preds = clsnet_only_starts(scores, cfg.threshold, stream.name)
        s_start = None
    else:
        s_start = loc_infer_stream(loc_model, scores)
        preds = generate_starts(fuse(scores, s_start), cfg.threshold, stream.name)
    if dump_dir is not None:
        stem = stream.name or "stream"
        save_scores(scores, dump_dir / f"{stem}.scores.jsonl", stream.name, _stamp(cfg))
        if s_start is not None:
            save_start_probs(s_start, dump_dir / f"{stem}.start.jsonl", stream.name, _stamp(cfg))
    return preds


def _default_predictions(cfg) -> Path:
    return Path(cfg.report_dir) / f"predictions-{cfg.variant}.jsonl"


def cmd_detect(cfg: ExperimentConfig, args) -> int:
    cls_model = _load_cls(cfg)
    loc_model = _load_loc(cfg)
    streams = [load_stream(p) for p in args.streams] if args.streams else _split_streams(cfg, "test")
    out = Path(args.out) if args.out else _default_predictions(cfg)
    _mkdir(out.parent)
    dump_dir = _mkdir(out.parent / f"{out.stem}.intermediate") if args.dump_intermediate else None
    preds = []
    for s in streams:
        preds.extend(_detect_one(cfg, cls_model, loc_model, s, dump_dir))
    save_predictions(preds, out, _stamp(cfg, variant=cfg.variant))
    log.info("%d starts written to %s", len(preds), out)
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    pred_path = Path(args.predictions) if args.predictions else _default_predictions(cfg)
    if not pred_path.exists():
        raise ConfigError(f"missing predictions file {pred_path}")
    preds = load_predictions(pred_path)
    streams = [load_stream(p) for p in args.streams] if args.streams else _split_streams(cfg, "test")
    gts = ground_truth(streams)
    try:
        report = evaluate(preds, gts, cfg.offsets, cfg.chunks_per_second, cfg.depths, cfg.strict)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    report.meta.update(_stamp(cfg, variant=cfg.variant, predictions=str(pred_path)))
    out = _mkdir(args.out or Path(cfg.report_dir) / cfg.variant)
    report.save_json(out / "report.json")
    (out / "report.csv").write_text(f"# startnet {__version__} config={_json_line(cfg.to_dict())}\n" + report.to_csv())
    log.info("p-mAP at %gs, depth 1.0: %.4f", report.offsets_seconds[0], report.pmap[0, -1])
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig, args) -> int:
    reports = {}
    for path in args.reports:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"missing report file {path}")
        try:
            rep = EvalReport.load_json(path)
        except (json.JSONDecodeError, KeyError) as e:
            raise ConfigError(f"{path}: not a report file ({e})") from None
        name = rep.meta.get("variant", path.parent.name)
        if name in reports:
            name = str(path)
        reports[name] = rep
    offsets = [float(x) for x in args.report_offsets.split(",")] if args.report_offsets else None
    depths = [float(x) for x in args.report_depths.split(",")] if args.report_depths else None
    try:
        text = compare_reports(reports, offsets, depths)
    except ValueError as e:
        raise ConfigError(f"requested offset or depth is missing from a report: {e}") from None
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "gen": (cmd_gen, "generate synthetic train/val/test stream files"),
    "train-cls": (cmd_train_cls, "train the per-chunk classifier"),
    "train-loc": (cmd_train_loc, "train the start localizer (policy gradient or cross-entropy variant)"),
    "detect": (cmd_detect, "run causal start detection and write predictions"),
    "eval": (cmd_eval, "score predictions and write report.json and report.csv"),
    "report": (cmd_report, "compare several reports in one CSV"),
}


def _flag_type(name, kind):
    def convert(raw):
        return _coerce(name, raw)

    convert.__name__ = {tuple: "list"}.get(kind, kind.__name__)
    return convert


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("-v", "--verbose", action="store_true")
    group = common.add_argument_group("experiment settings (override the config file)")
    for name, f in FIELDS.items():
        kind = type(f.default)
        metavar = {bool: "BOOL", tuple: "A,B,..."}.get(kind, kind.__name__.upper())
        group.add_argument("--" + name.replace("_", "-"), dest=name, default=argparse.SUPPRESS,
                           type=_flag_type(name, kind), metavar=metavar)

    parser = argparse.ArgumentParser(prog="startnet", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"startnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name in ("detect", "eval"):
            p.add_argument("--streams", nargs="*", help="stream files (default: the test split under data_root)")
        if name == "detect":
            p.add_argument("--out", help="predictions file (default: report_dir/predictions-<variant>.jsonl)")
            p.add_argument("--dump-intermediate", action="store_true",
                           help="also write per-stream score and start-probability files")
        if name == "eval":
            p.add_argument("--predictions", help="predictions file (default: report_dir/predictions-<variant>.jsonl)")
            p.add_argument("--out", help="output directory (default: report_dir/<variant>)")
        if name == "report":
            p.add_argument("reports", nargs="+", help="report.json files")
            p.add_argument("--out", help="CSV path (default: stdout)")
            p.add_argument("--report-offsets", help="comma-separated offsets in seconds (default: all)")
            p.add_argument("--report-depths", help="comma-separated recall depths (default: all)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on bad usage, which matches our code
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k in FIELDS}
    try:
        cfg = resolve_config(read_config_file(args.config) if args.config else {}, flags)
        return COMMANDS[args.command][0](cfg, args)
    except (ConfigError, StreamFormatError) as e:
        print(f"startnet: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericError, FloatingPointError) as e:
        print(f"startnet: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as e:
        print(f"startnet: error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
