"""Command-line entry point: ``segkit <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/format error,
3 divergence or verification failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import data as dk
from .architectures import KINDS, ModelSpec, build_model, describe
from .engine import LOSSES, TrainConfig, evaluate, load_checkpoint, model_from_checkpoint, predict_scene, train
from .errors import (
    ConfigError,
    CoverageError,
    DimensionError,
    DivergenceError,
    FormatError,
    LabelError,
    UsageError,
)
from .imageio import read_pnm, write_pnm, write_tnsr
from .objectives import diff_map
from .verify import SUITES

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FAIL = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# run config


@dataclass
class RunConfig:
    model: str
    input_size: int
    num_classes: int
    task: str = "ships_optical"
    input_channels: int = 1
    width_multiplier: Fraction = Fraction(1)
    dropout: float = 0.2
    loss: str = "categorical_ce"
    epochs: int = 120
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    data_root: str = ""
    out_dir: str = ""

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            self.model,
            self.input_size,
            self.input_size,
            self.input_channels,
            self.num_classes,
            self.width_multiplier,
            self.dropout,
            self.seed,
        )

    def train_config(self, checkpoint_path=None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            loss=self.loss,
            seed=self.seed,
            checkpoint_path=checkpoint_path,
        )


_CONVERT = {
    "input_size": int,
    "num_classes": int,
    "input_channels": int,
    "width_multiplier": lambda v: Fraction(v.strip()),
    "dropout": float,
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "beta1": float,
    "beta2": float,
    "epsilon": float,
    "seed": int,
}
CONFIG_KEYS = tuple(f.name for f in fields(RunConfig))
REQUIRED_KEYS = ("model", "input_size", "num_classes")


def parse_run_config(text: str, overrides: dict | None = None, required=REQUIRED_KEYS) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment); ``overrides`` win over the file."""
    raw: dict[str, str] = {}
    errors = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value', got {line!r}")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        raw[key] = value
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = str(v)
    missing = [k for k in required if k not in raw]
    if missing:
        errors.append(f"missing required keys: {', '.join(missing)}")
    values = {}
    for k, v in raw.items():
        try:
            values[k] = _CONVERT.get(k, str)(v)
        except (ValueError, ZeroDivisionError):
            errors.append(f"key {k!r}: cannot parse {v!r}")
    if errors:
        raise UsageError("bad run config:\n  " + "\n  ".join(errors))
    cfg = RunConfig(**values)
    if cfg.model not in KINDS:
        raise UsageError(f"model must be one of {', '.join(KINDS)}, got {cfg.model!r}")
    if cfg.loss not in LOSSES:
        raise UsageError(f"loss must be one of {', '.join(LOSSES)}, got {cfg.loss!r}")
    return cfg


# ---------------------------------------------------------------------------
# commands


def _out(msg: str) -> None:
    print(msg)


def cmd_synth(args) -> int:
    if args.task not in dk.TASKS:
        raise UsageError(f"unknown task {args.task!r}; valid tasks: {', '.join(dk.TASKS)}")
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    size = args.size or dk.DEFAULT_SIZES[args.task]
    scenes = dk.synth_scenes(args.task, args.count, size, args.seed)
    if args.count >= 2:
        sset = dk.split_dataset(scenes, Fraction(args.ratio), args.seed)
    else:
        sset = dk.SampleSet(scenes, [dk.TRAIN], args.seed)
    dk.write_dataset(args.out, sset)
    _out(f"wrote {args.count} scenes to {args.out}: {len(sset.train)} train / {len(sset.validation)} validation")
    return EXIT_OK


def cmd_tile(args) -> int:
    image = read_pnm(args.input)
    mask = read_pnm(args.mask) if args.mask else None
    if mask is not None and args.labels:
        mask = dk.encode_labels(mask, dk.LABEL_MAPS[args.labels])
    if mask is None:
        mask = np.zeros(image.shape[:2], dtype=np.uint8)
    tiles = dk.tile_raster(image, mask, args.tile, args.overlap, provenance=f"file:{args.input}")
    sset = dk.split_dataset(tiles, Fraction(args.ratio), args.seed) if len(tiles) >= 2 else dk.SampleSet(tiles, [dk.TRAIN])
    dk.write_dataset(args.out, sset)
    _out(f"wrote {len(tiles)} tiles of {args.tile}x{args.tile} to {args.out}")
    return EXIT_OK


def _config_from(args, required=REQUIRED_KEYS) -> RunConfig:
    text = Path(args.config).read_text() if args.config else ""
    overrides = {k: getattr(args, k, None) for k in CONFIG_KEYS}
    return parse_run_config(text, overrides, required)


def cmd_describe(args) -> int:
    cfg = _config_from(args)
    _out(describe(cfg.model_spec()))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from(args, REQUIRED_KEYS + ("data_root", "out_dir"))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sset = dk.read_dataset(cfg.data_root)
    model = build_model(cfg.model_spec())

    def report(e):
        _out(f"epoch {e.epoch} loss={e.loss:.6f} train_miou={e.train_miou:.4f} val_miou={e.val_miou:.4f}")

    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, hist = train(model, sset, cfg.train_config(str(out / "checkpoint.segc")), report, resume)
    hist.write(out / "history.csv")
    _out(f"wrote {out / 'checkpoint.segc'} and {out / 'history.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.model))
    sset = dk.read_dataset(args.data)
    scenes = sset.scenes if args.split == "all" else sset.subset(args.split)
    if not scenes:
        raise ConfigError(f"split {args.split!r} is empty")
    _, report = evaluate(model, scenes)
    _out("\n".join(report.to_lines()))
    return EXIT_OK


def cmd_predict(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.model))
    image = read_pnm(args.input)
    labels, probs = predict_scene(model, image, None, args.overlap)
    write_pnm(args.out, labels.astype(np.uint8))
    if args.probs:
        write_tnsr(args.probs, probs.astype(np.float32))
    _out(f"wrote {args.out}")
    return EXIT_OK


def cmd_diff(args) -> int:
    d = diff_map(read_pnm(args.pred), read_pnm(args.gt))
    write_pnm(args.out, d)
    _out(f"{int((d > 0).sum())} of {d.size} pixels differ")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = SUITES[args.suite]()
    for r in results:
        _out(r.line())
    failed = sum(not r.passed for r in results)
    _out(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p) -> None:
    p.add_argument("--config", help="run config file of 'key = value' lines (default: none)")
    defaults = {f.name: f.default for f in fields(RunConfig)}
    for key in CONFIG_KEYS:
        d = defaults.get(key)
        shown = "required" if key in REQUIRED_KEYS else repr(d) if not isinstance(d, Fraction) else str(d)
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, help=f"overrides the config file (default: {shown})")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="segkit", description="Satellite image segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset", formatter_class=fmt)
    p.add_argument("--task", required=True, help=f"one of {', '.join(dk.TASKS)}")
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("--size", type=int, default=None, help="scene size in pixels (default: task default)")
    p.add_argument("--seed", type=int, default=0, help="generation and split seed")
    p.add_argument("--ratio", default="4/5", help="training fraction")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tile", help="cut a raster (and mask) into a tiled dataset", formatter_class=fmt)
    p.add_argument("--input", required=True, help="PGM/PPM image")
    p.add_argument("--mask", default=None, help="PGM mask (raw values, see --labels)")
    p.add_argument("--labels", default=None, choices=sorted(dk.LABEL_MAPS), help="label map for raw mask values")
    p.add_argument("--tile", type=int, default=512, help="tile size")
    p.add_argument("--overlap", type=int, default=0, help="overlap between neighbouring tiles")
    p.add_argument("--seed", type=int, default=0, help="split seed")
    p.add_argument("--ratio", default="4/5", help="training fraction")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("describe", help="print a model's shape plan")
    _add_config_flags(p)
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("train", help="train a model from a run config")
    _add_config_flags(p)
    p.add_argument("--resume", default=None, help="checkpoint to continue from (default: none)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print the metrics report of a checkpoint on a dataset", formatter_class=fmt)
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="validation", choices=("train", "validation", "all"), help="which scenes")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict a whole scene", formatter_class=fmt)
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--input", required=True, help="PGM/PPM image")
    p.add_argument("--out", required=True, help="output mask PGM (class ids)")
    p.add_argument("--probs", default=None, help="optional per-class probability TNSR")
    p.add_argument("--overlap", type=int, default=0, help="tile overlap")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("diff", help="write a prediction vs ground-truth difference map", formatter_class=fmt)
    p.add_argument("--pred", required=True, help="predicted mask PGM")
    p.add_argument("--gt", required=True, help="ground-truth mask PGM")
    p.add_argument("--out", required=True, help="output PGM (0 agree, 255 differ)")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("verify", help="run a self-check suite", formatter_class=fmt)
    p.add_argument("--suite", default="gradcheck", choices=sorted(SUITES), help="suite to run")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_FAIL
    except (FormatError, LabelError, CoverageError, DimensionError, ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
