"""Training loop, evaluation, whole-scene prediction and checkpoints."""

from __future__ import annotations

import json
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .architectures import Model, ModelSpec, build_model
from .data import SampleSet, Scene, stitch_tiles, tile_raster, to_batch
from .errors import ConfigError, DimensionError, DivergenceError, FormatError
from .imageio import tnsr_bytes, tnsr_from_bytes
from .objectives import (
    ConfusionCounts,
    argmax_labels,
    confusion,
    metrics_report,
    softmax_cross_entropy,
)
from .ops import INFER, TRAIN, BatchNormState, softmax_array
from .optim import AdamState, adam_init, adam_step
from .rng import RngStream
from .tensor import Tape

LOSSES = ("binary_ce", "categorical_ce")

# sub-stream keys under the training seed
_SHUFFLE_KEY = 0
_DROPOUT_KEY = 1


@dataclass
class TrainConfig:
    epochs: int = 120
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    loss: str = "categorical_ce"
    seed: int = 0
    checkpoint_path: str | None = None
    eval_every_epoch: bool = True
    eval_batch_size: int = 8

    def validate(self, num_classes: int) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.loss == "binary_ce" and num_classes != 2:
            raise ConfigError(f"binary_ce requires 2 classes, model has {num_classes}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")


@dataclass
class HistoryEntry:
    epoch: int
    loss: float
    train_acc: float
    train_miou: float
    val_acc: float
    val_miou: float
    seconds: float
    train_iou: list[float] = field(default_factory=list)
    val_iou: list[float] = field(default_factory=list)

    def csv_line(self) -> str:
        vals = (self.loss, self.train_acc, self.train_miou, self.val_acc, self.val_miou, self.seconds)
        return ",".join([str(self.epoch)] + [repr(float(v)) for v in vals])


HISTORY_HEADER = "epoch,loss,train_acc,train_miou,val_acc,val_miou,seconds"


class History(list):
    """One :class:`HistoryEntry` per completed epoch, in order."""

    def to_csv(self) -> str:
        return "\n".join([HISTORY_HEADER] + [e.csv_line() for e in self]) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    bn_stats: dict[str, BatchNormState]
    adam: AdamState
    epoch: int
    rng_state: tuple[int, int, int, int]
    history: History
    config: dict = field(default_factory=dict)
    version: int = 1


# ---------------------------------------------------------------------------
# evaluation


def _check_scenes(model: Model, scenes: list[Scene]) -> None:
    s = model.spec
    want = (s.input_height, s.input_width, s.input_channels)
    for i, sc in enumerate(scenes):
        if tuple(sc.image.shape) != want:
            raise DimensionError(f"scene {i} has shape {list(sc.image.shape)}, model expects {list(want)}")


def infer_probabilities(model: Model, x: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Infer-mode softmax scores for a normalized ``[N, H, W, C]`` array."""
    out = []
    for i in range(0, len(x), batch_size):
        out.append(softmax_array(model.logits(x[i : i + batch_size], INFER).data))
    return np.concatenate(out)


def evaluate(model: Model, scenes: list[Scene], num_classes: int | None = None, batch_size: int = 8):
    """Infer-mode confusion counts over ``scenes`` and the matching report."""
    k = num_classes or model.spec.num_classes
    if k != model.spec.num_classes:
        raise DimensionError(f"num_classes {k} != model's {model.spec.num_classes}")
    _check_scenes(model, scenes)
    counts = ConfusionCounts.zeros(k)
    dt = np.float32 if model.dtype == "f32" else np.float64
    for i in range(0, len(scenes), batch_size):
        x, y = to_batch(scenes[i : i + batch_size], dt)
        pred = argmax_labels(infer_probabilities(model, x, batch_size))
        counts = counts + confusion(pred, y, k)
    return counts, metrics_report(counts)


def predict_scene(model: Model, image, tile: int | None = None, overlap: int = 0, batch_size: int = 8):
    """Tile, run inference per tile, stitch.

    Returns ``(labels [H, W], probabilities [H, W, C])``; both are stitched
    with the same last-writer rule, so labels equal the argmax of the
    stitched probabilities.
    """
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    spec = model.spec
    tile = tile or spec.input_height
    if tile != spec.input_height or tile != spec.input_width:
        raise DimensionError(f"tile {tile} does not match model input {spec.input_height}x{spec.input_width}")
    if img.shape[2] != spec.input_channels:
        raise DimensionError(f"image has {img.shape[2]} channels, model expects {spec.input_channels}")
    h, w = img.shape[:2]
    if h < tile or w < tile:
        raise ConfigError(f"image {h}x{w} is smaller than tile {tile}")
    tiles = tile_raster(img, None, tile, overlap)
    dt = np.float32 if model.dtype == "f32" else np.float64
    x = np.stack([t.image for t in tiles]).astype(dt)
    if img.dtype == np.uint8:
        x /= dt(255)
    probs = infer_probabilities(model, x, batch_size)
    pairs = [(t.origin, p) for t, p in zip(tiles, probs)]
    prob_map = stitch_tiles(pairs, (h, w))
    labels = stitch_tiles([(o, argmax_labels(p).astype(np.uint8)) for o, p in pairs], (h, w))
    return labels, prob_map


# ---------------------------------------------------------------------------
# training


def _shuffle(seed: int, epoch: int, n: int) -> np.ndarray:
    return RngStream(seed, _SHUFFLE_KEY, epoch).permutation(n)


def _restore(model: Model, ckpt: Checkpoint) -> None:
    if ckpt.spec != model.spec:
        raise ConfigError("checkpoint model spec differs from the model being trained")
    for name, p in model.params.items():
        if name not in ckpt.params:
            raise FormatError(f"checkpoint lacks parameter {name!r}", section="params")
        p.data = ckpt.params[name].astype(p.data.dtype, copy=True)
    for name, st in ckpt.bn_stats.items():
        model.bn_state[name] = st.copy()


def snapshot(model: Model, adam: AdamState, epoch: int, rng: RngStream, history, config: TrainConfig) -> Checkpoint:
    cfg = asdict(config)
    cfg.pop("checkpoint_path", None)
    return Checkpoint(
        spec=model.spec,
        params={k: p.data.copy() for k, p in model.params.items()},
        bn_stats={k: s.copy() for k, s in model.bn_state.items()},
        adam=adam.copy(),
        epoch=epoch,
        rng_state=rng.get_state(),
        history=History(history),
        config=cfg,
    )


def train(
    model: Model,
    data: SampleSet,
    config: TrainConfig,
    callback: Callable[[HistoryEntry], None] | None = None,
    resume: Checkpoint | None = None,
    clock: Callable[[], float] = time.perf_counter,
) -> tuple[Checkpoint, History]:
    """Train ``model`` in place with Adam; returns the final checkpoint and history.

    ``resume`` continues from a checkpoint taken at the end of some epoch k;
    the result is bit-identical to an uninterrupted run. ``clock`` feeds the
    per-epoch wall time and can be replaced for reproducible histories.
    """
    spec = model.spec
    config.validate(spec.num_classes)
    train_scenes, val_scenes = data.train, data.validation
    if not train_scenes:
        raise ConfigError("training split is empty")
    _check_scenes(model, train_scenes)
    _check_scenes(model, val_scenes)
    dt = np.float32 if model.dtype == "f32" else np.float64
    x_all, y_all = to_batch(train_scenes, dt)

    rng = RngStream(config.seed, _DROPOUT_KEY)
    if resume is not None:
        _restore(model, resume)
        adam = resume.adam.copy()
        adam.lr, adam.beta1, adam.beta2, adam.epsilon = config.lr, config.beta1, config.beta2, config.epsilon
        rng.set_state(resume.rng_state)
        history = History(resume.history)
        start = resume.epoch
    else:
        adam = adam_init(model.params, config.lr, config.beta1, config.beta2, config.epsilon)
        history = History()
        start = 0

    params = model.params
    for p in params.values():
        p.requires_grad = True
    n = len(train_scenes)
    try:
        for epoch in range(start + 1, config.epochs + 1):
            t0 = clock()
            order = _shuffle(config.seed, epoch, n)
            total, pixels = 0.0, 0
            for b, lo in enumerate(range(0, n, config.batch_size)):
                idx = order[lo : lo + config.batch_size]
                xb, yb = x_all[idx], y_all[idx]
                with Tape() as tape:
                    logits = model.logits(xb, TRAIN, rng)
                    loss = softmax_cross_entropy(logits, yb, config.loss)
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(epoch, b, value)
                grads = tape.backward(loss)
                named = {k: grads[p] if p in grads else np.zeros_like(p.data) for k, p in params.items()}
                adam_step(adam, named, params)
                total += value * yb.size
                pixels += yb.size
            if config.eval_every_epoch or epoch == config.epochs:
                _, tr = evaluate(model, train_scenes, spec.num_classes, config.eval_batch_size)
                if val_scenes:
                    _, va = evaluate(model, val_scenes, spec.num_classes, config.eval_batch_size)
                    val = (va.pixel_acc, va.mean_iou, va.iou)
                else:
                    val = (math.nan, math.nan, [])
                train_m = (tr.pixel_acc, tr.mean_iou, tr.iou)
            else:
                train_m = val = (math.nan, math.nan, [])
            entry = HistoryEntry(
                epoch, total / pixels, train_m[0], train_m[1], val[0], val[1], clock() - t0, list(train_m[2]), list(val[2])
            )
            history.append(entry)
            if callback is not None:
                callback(entry)
    finally:
        for p in params.values():
            p.requires_grad = False
            p.grad = None

    ckpt = snapshot(model, adam, history[-1].epoch if history else start, rng, history, config)
    if config.checkpoint_path:
        save_checkpoint(ckpt, config.checkpoint_path)
    return ckpt, history


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    dtype = "f64" if next(iter(ckpt.params.values())).dtype == np.float64 else "f32"
    model = build_model(ckpt.spec, dtype)
    _restore(model, ckpt)
    return model


# ---------------------------------------------------------------------------
# checkpoint file
#
#   b"SEGC"  u16 version
#   repeated: u8 name_len, name, u64 payload_len, u32 crc32(payload), payload

CKPT_MAGIC = b"SEGC"
CKPT_VERSION = 1
SECTIONS = ("spec", "meta", "params", "bn_stats", "adam", "rng", "history")


def _named_tnsr(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    return struct.pack("<H", len(raw)) + raw + tnsr_bytes(arr)


def _read_named_tnsr(buf: bytes, pos: int, section: str):
    if pos + 2 > len(buf):
        raise FormatError("truncated entry name", pos, section)
    (ln,) = struct.unpack_from("<H", buf, pos)
    name = buf[pos + 2 : pos + 2 + ln].decode()
    arr, end = tnsr_from_bytes(buf, pos + 2 + ln)
    return name, arr, end


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _u128(v: int) -> bytes:
    return int(v).to_bytes(16, "little")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    sections = {}
    sections["spec"] = _json(ckpt.spec.to_dict())
    sections["meta"] = _json({"epoch": ckpt.epoch, "config": ckpt.config})

    body = struct.pack("<I", len(ckpt.params))
    for name in sorted(ckpt.params):
        body += _named_tnsr(name, ckpt.params[name])
    sections["params"] = body

    body = struct.pack("<I", len(ckpt.bn_stats))
    for name in sorted(ckpt.bn_stats):
        st = ckpt.bn_stats[name]
        body += struct.pack("<H", len(name.encode())) + name.encode()
        body += struct.pack("<dd?", st.momentum, st.eps, st.populated)
        if st.populated:
            body += tnsr_bytes(st.running_mean) + tnsr_bytes(st.running_var)
    sections["bn_stats"] = body

    a = ckpt.adam
    body = struct.pack("<ddddQI", a.lr, a.beta1, a.beta2, a.epsilon, a.t, len(a.m))
    for name in sorted(a.m):
        body += _named_tnsr(name, a.m[name]) + tnsr_bytes(a.v[name])
    sections["adam"] = body

    s, inc, has32, uint = ckpt.rng_state
    sections["rng"] = _u128(s) + _u128(inc) + struct.pack("<BQ", has32, uint)

    sections["history"] = _json([asdict(e) for e in ckpt.history])

    out = bytearray(CKPT_MAGIC + struct.pack("<H", ckpt.version))
    for name in SECTIONS:
        payload = sections[name]
        out += bytes([len(name)]) + name.encode()
        out += struct.pack("<QI", len(payload), zlib.crc32(payload))
        out += payload
    return bytes(out)


def _split_sections(buf: bytes) -> dict[str, bytes]:
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)", 0)
    if len(buf) < 6:
        raise FormatError("truncated checkpoint header", len(buf))
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint version {version} is not supported (expected {CKPT_VERSION})", 4)
    pos, out = 6, {}
    while pos < len(buf):
        ln = buf[pos]
        name = buf[pos + 1 : pos + 1 + ln].decode(errors="replace")
        pos += 1 + ln
        if pos + 12 > len(buf):
            raise FormatError("truncated section header", pos, name)
        size, crc = struct.unpack_from("<QI", buf, pos)
        pos += 12
        payload = buf[pos : pos + size]
        if len(payload) != size:
            raise FormatError(f"section payload truncated: need {size} bytes, have {len(payload)}", pos, name)
        if zlib.crc32(payload) != crc:
            raise FormatError("section checksum mismatch", pos, name)
        out[name] = payload
        pos += size
    missing = [s for s in SECTIONS if s not in out]
    if missing:
        raise FormatError(f"checkpoint lacks sections {missing}", len(buf))
    return out


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    sec = _split_sections(buf)
    try:
        spec = ModelSpec.from_dict(json.loads(sec["spec"]))
    except (ValueError, KeyError) as e:
        raise FormatError(f"bad model spec: {e}", section="spec") from None
    meta = json.loads(sec["meta"])

    body = sec["params"]
    (count,) = struct.unpack_from("<I", body, 0)
    pos, params = 4, {}
    for _ in range(count):
        name, arr, pos = _read_named_tnsr(body, pos, "params")
        params[name] = arr

    body = sec["bn_stats"]
    (count,) = struct.unpack_from("<I", body, 0)
    pos, bn = 4, {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", body, pos)
        name = body[pos + 2 : pos + 2 + ln].decode()
        pos += 2 + ln
        momentum, eps, populated = struct.unpack_from("<dd?", body, pos)
        pos += 17
        st = BatchNormState(momentum=momentum, eps=eps)
        if populated:
            st.running_mean, pos = tnsr_from_bytes(body, pos)
            st.running_var, pos = tnsr_from_bytes(body, pos)
        bn[name] = st

    body = sec["adam"]
    lr, b1, b2, eps, t, count = struct.unpack_from("<ddddQI", body, 0)
    pos = struct.calcsize("<ddddQI")
    m, v = {}, {}
    for _ in range(count):
        name, m[name], pos = _read_named_tnsr(body, pos, "adam")
        v[name], pos = tnsr_from_bytes(body, pos)
    adam = AdamState(m, v, t, lr, b1, b2, eps)

    r = sec["rng"]
    has32, uint = struct.unpack_from("<BQ", r, 32)
    rng_state = (int.from_bytes(r[:16], "little"), int.from_bytes(r[16:32], "little"), has32, uint)

    history = History(HistoryEntry(**e) for e in json.loads(sec["history"]))
    return Checkpoint(spec, params, bn, adam, int(meta["epoch"]), rng_state, history, meta["config"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
