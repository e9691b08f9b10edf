"""Modified U-Net and VGG-UNet builders.

Both networks are described as a flat program of steps (conv, batch norm,
pool, upsample, concat, ...). :func:`shape_plan` runs the program on shapes
only; :class:`Model` executes it on tensors, so the two can never disagree.

Modified U-Net (binary segmentation), 10 convolutions in total::

    enc1..enc5   conv3x3 -> BN -> ReLU, max-pool between stages (4 pools)
    bottleneck   dropout after enc5
    dec4..dec1   convT 2x2/2 -> concat(skip) -> conv3x3 -> BN -> ReLU
    head         conv1x1 -> softmax

VGG-UNet (multi-label): VGG16's 13-conv encoder in blocks of (2, 2, 3, 3, 3),
each followed by a pool, and a mirrored 13-conv decoder of five
upsample+concat blocks (3, 3, 3, 2, 2), then a per-pixel dense head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .ops import INFER, TRAIN, BatchNormState
from .rng import RngStream
from .tensor import Tensor

MODIFIED_UNET = "modified_unet"
VGG_UNET = "vgg_unet"
KINDS = (MODIFIED_UNET, VGG_UNET)

UNET_WIDTHS = (64, 128, 256, 512, 1024)
VGG_WIDTHS = (64, 128, 256, 512, 512)
VGG_ENCODER_CONVS = (2, 2, 3, 3, 3)
VGG_DECODER_CONVS = (3, 3, 3, 2, 2)


def _fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, str):
        return Fraction(x.strip())
    if isinstance(x, float):
        return Fraction(x).limit_denominator(1 << 20)
    return Fraction(x)


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_height: int
    input_width: int
    input_channels: int = 1
    num_classes: int = 2
    width_multiplier: Fraction = Fraction(1)
    dropout_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "width_multiplier", _fraction(self.width_multiplier))
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        pools = 4 if self.kind == MODIFIED_UNET else 5
        div = 2**pools
        if self.input_height < 1 or self.input_width < 1 or self.input_height % div or self.input_width % div:
            raise ConfigError(
                f"{self.kind} input dims must be positive multiples of {div}, "
                f"got {self.input_height}x{self.input_width}"
            )
        if self.input_channels < 1:
            raise ConfigError("input_channels must be >= 1")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.width_multiplier <= 0:
            raise ConfigError(f"width_multiplier must be > 0, got {self.width_multiplier}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    def widths(self) -> tuple[int, ...]:
        base = UNET_WIDTHS if self.kind == MODIFIED_UNET else VGG_WIDTHS
        return tuple(math.ceil(self.width_multiplier * b) for b in base)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_height": self.input_height,
            "input_width": self.input_width,
            "input_channels": self.input_channels,
            "num_classes": self.num_classes,
            "width_multiplier": str(self.width_multiplier),
            "dropout_rate": repr(float(self.dropout_rate)),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            kind=d["kind"],
            input_height=int(d["input_height"]),
            input_width=int(d["input_width"]),
            input_channels=int(d["input_channels"]),
            num_classes=int(d["num_classes"]),
            width_multiplier=_fraction(d["width_multiplier"]),
            dropout_rate=float(d["dropout_rate"]),
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class Step:
    kind: str  # conv | bn | relu | pool | dropout | up | concat | save | dense | softmax
    name: str = ""
    section: str = ""
    block: int = 0
    k: int = 0
    cin: int = 0
    cout: int = 0
    key: str = ""


@dataclass(frozen=True)
class LayerRecord:
    index: int
    kind: str
    name: str
    section: str
    block: int
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    params: int
    skip_shape: tuple[int, ...] | None = None


def _conv_block(steps, name, section, block, cin, cout):
    steps.append(Step("conv", f"{name}.conv", section, block, k=3, cin=cin, cout=cout))
    steps.append(Step("bn", f"{name}.bn", section, block, cout=cout))
    steps.append(Step("relu", f"{name}.relu", section, block))


def _unet_program(spec: ModelSpec) -> list[Step]:
    w = spec.widths()
    steps: list[Step] = []
    cin = spec.input_channels
    for i in range(5):
        section = "bottleneck" if i == 4 else "encoder"
        _conv_block(steps, f"enc{i + 1}", section, i + 1, cin, w[i])
        cin = w[i]
        if i < 4:
            steps.append(Step("save", key=f"skip{i + 1}", section=section, block=i + 1))
            steps.append(Step("pool", f"enc{i + 1}.pool", section, i + 1))
    steps.append(Step("dropout", "bottleneck.dropout", "bottleneck", 5))
    for i in range(3, -1, -1):
        blk = 4 - i
        steps.append(Step("up", f"dec{i + 1}.up", "decoder", blk, k=2, cin=cin, cout=w[i]))
        steps.append(Step("concat", f"dec{i + 1}.concat", "decoder", blk, key=f"skip{i + 1}"))
        _conv_block(steps, f"dec{i + 1}", "decoder", blk, 2 * w[i], w[i])
        cin = w[i]
    steps.append(Step("conv", "head.conv", "head", 5, k=1, cin=cin, cout=spec.num_classes))
    steps.append(Step("softmax", "head.softmax", "head", 5))
    return steps


def _vgg_program(spec: ModelSpec) -> list[Step]:
    w = spec.widths()
    steps: list[Step] = []
    cin = spec.input_channels
    for b, n_conv in enumerate(VGG_ENCODER_CONVS):
        for j in range(n_conv):
            _conv_block(steps, f"enc{b + 1}.{j + 1}", "encoder", b + 1, cin, w[b])
            cin = w[b]
        steps.append(Step("save", key=f"skip{b + 1}", section="encoder", block=b + 1))
        steps.append(Step("pool", f"enc{b + 1}.pool", "encoder", b + 1))
    steps.append(Step("dropout", "bottleneck.dropout", "bottleneck", 5))
    for d, n_conv in enumerate(VGG_DECODER_CONVS):
        e = 4 - d  # mirrored encoder block (0-based)
        width = w[e]
        steps.append(Step("up", f"dec{d + 1}.up", "decoder", d + 1, k=2, cin=cin, cout=width))
        steps.append(Step("concat", f"dec{d + 1}.concat", "decoder", d + 1, key=f"skip{e + 1}"))
        cin = 2 * width
        for j in range(n_conv):
            _conv_block(steps, f"dec{d + 1}.{j + 1}", "decoder", d + 1, cin, width)
            cin = width
    steps.append(Step("dense", "head.dense", "head", 6, cin=cin, cout=spec.num_classes))
    steps.append(Step("softmax", "head.softmax", "head", 6))
    return steps


def program(spec: ModelSpec) -> list[Step]:
    return _unet_program(spec) if spec.kind == MODIFIED_UNET else _vgg_program(spec)


def _step_params(step: Step) -> int:
    if step.kind == "conv":
        return step.k * step.k * step.cin * step.cout + step.cout
    if step.kind == "up":
        return step.k * step.k * step.cin * step.cout + step.cout
    if step.kind == "bn":
        return 2 * step.cout
    if step.kind == "dense":
        return step.cin * step.cout + step.cout
    return 0


def _plan_from_program(spec: ModelSpec, steps: list[Step]) -> list[LayerRecord]:
    shape = (spec.input_height, spec.input_width, spec.input_channels)
    saved: dict[str, tuple] = {}
    plan = []
    for step in steps:
        if step.kind == "save":
            saved[step.key] = shape
            continue
        h, w, c = shape
        skip = None
        if step.kind in ("conv", "dense"):
            out = (h, w, step.cout)
        elif step.kind == "pool":
            out = (h // 2, w // 2, c)
        elif step.kind == "up":
            out = (h * 2, w * 2, step.cout)
        elif step.kind == "concat":
            skip = saved[step.key]
            if skip[:2] != (h, w):
                raise DimensionError(f"{step.name}: skip {skip} does not match {shape}")
            out = (h, w, c + skip[2])
        else:
            out = shape
        kind = step.kind
        if kind == "conv":
            kind = f"conv{step.k}x{step.k}"
        elif kind == "up":
            kind = "conv_transpose2x2"
        elif kind == "pool":
            kind = "maxpool2x2"
        elif kind == "dense":
            kind = "dense1x1"
        plan.append(
            LayerRecord(len(plan), kind, step.name, step.section, step.block, shape, out, _step_params(step), skip)
        )
        shape = out
    return plan


def shape_plan(spec: ModelSpec) -> list[LayerRecord]:
    """Static shape trace of the network; allocates no parameters."""
    return _plan_from_program(spec, program(spec))


def count_layers(plan: list[LayerRecord], kinds: tuple[str, ...], sections: tuple[str, ...] | None = None) -> int:
    return sum(1 for r in plan if r.kind in kinds and (sections is None or r.section in sections))


def conv_count(plan: list[LayerRecord], sections: tuple[str, ...] | None = None) -> int:
    return count_layers(plan, ("conv3x3", "conv1x1"), sections)


def describe(spec: ModelSpec) -> str:
    """Plain-text layer table with a totals row."""
    plan = shape_plan(spec)

    def fmt(s):
        return "[" + ",".join(str(v) for v in s) + "]"

    rows = [("idx", "kind", "name", "in_shape", "out_shape", "params")]
    for r in plan:
        in_s = fmt(r.in_shape) if r.skip_shape is None else f"{fmt(r.in_shape)}+{fmt(r.skip_shape)}"
        rows.append((str(r.index), r.kind, r.name, in_s, fmt(r.out_shape), str(r.params)))
    rows.append(("", "total", f"{len(plan)} layers", "", "", str(sum(r.params for r in plan))))
    widths = [max(len(row[i]) for row in rows) for i in range(6)]
    lines = ["  ".join(cell.ljust(wd) for cell, wd in zip(row, widths)).rstrip() for row in rows]
    header = f"# {spec.kind} input={spec.input_height}x{spec.input_width}x{spec.input_channels} " \
             f"classes={spec.num_classes} width={spec.width_multiplier}"
    return "\n".join([header] + lines)


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, Tensor]
    bn_state: dict[str, BatchNormState]
    plan: list[LayerRecord]
    steps: list[Step] = field(repr=False, default_factory=list)

    @property
    def dtype(self) -> str:
        return next(iter(self.params.values())).dtype

    def parameter_count(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def logits(self, x, mode: str = INFER, rng: RngStream | None = None) -> Tensor:
        """Run everything up to (not including) the final softmax."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        spec = self.spec
        want = (spec.input_height, spec.input_width, spec.input_channels)
        if x.ndim != 4 or tuple(x.shape[1:]) != want:
            raise DimensionError(f"batch shape {list(x.shape)} does not match model input [N,{','.join(map(str, want))}]")
        if x.dtype != self.dtype:
            x = x.astype(self.dtype)
        p = self.params
        saved: dict[str, Tensor] = {}
        for step in self.steps:
            kind = step.kind
            if kind == "conv":
                x = ops.conv2d(x, p[f"{step.name}.kernel"], p[f"{step.name}.bias"], stride=1, padding=step.k // 2)
            elif kind == "bn":
                x = ops.batchnorm2d(x, p[f"{step.name}.gamma"], p[f"{step.name}.beta"], self.bn_state[step.name], mode)
            elif kind == "relu":
                x = ops.relu(x)
            elif kind == "save":
                saved[step.key] = x
            elif kind == "pool":
                x, _ = ops.maxpool2d(x, 2)
            elif kind == "dropout":
                x = ops.dropout(x, spec.dropout_rate, rng, mode)
            elif kind == "up":
                x = ops.conv_transpose2d(x, p[f"{step.name}.kernel"], p[f"{step.name}.bias"], stride=2)
            elif kind == "concat":
                x = ops.concat_channels(x, saved.pop(step.key))
            elif kind == "dense":
                n, h, w, c = x.shape
                flat = ops.reshape(x, (n * h * w, c))
                y = ops.dense(flat, p[f"{step.name}.weights"], p[f"{step.name}.bias"])
                x = ops.reshape(y, (n, h, w, step.cout))
            elif kind == "softmax":
                break
        return x

    def astype(self, dtype: str) -> "Model":
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        bn = {}
        for k, s in self.bn_state.items():
            c = s.copy()
            if c.populated:
                c.running_mean = c.running_mean.astype(params[f"{k}.gamma"].data.dtype)
                c.running_var = c.running_var.astype(params[f"{k}.gamma"].data.dtype)
            bn[k] = c
        return Model(self.spec, params, bn, self.plan, self.steps)

    def copy(self) -> "Model":
        return self.astype(self.dtype)


def model_forward(model: Model, batch, mode: str = INFER, rng: RngStream | None = None) -> Tensor:
    """Per-pixel class probabilities ``[N, H, W, num_classes]``.

    In train mode ops are recorded on the active :class:`~segkit.tensor.Tape`
    (if any), batch statistics update the running state and dropout draws
    from ``rng``.
    """
    return ops.softmax_channels(model.logits(batch, mode, rng))


def _build(spec: ModelSpec, dtype: str) -> Model:
    steps = program(spec)
    plan = _plan_from_program(spec, steps)
    rng = RngStream(spec.seed)
    params: dict[str, Tensor] = {}
    bn: dict[str, BatchNormState] = {}
    for step in steps:
        if step.kind in ("conv", "up"):
            fan_in = step.k * step.k * step.cin
            shape = (step.k, step.k, step.cin, step.cout) if step.kind == "conv" else (step.k, step.k, step.cout, step.cin)
            params[f"{step.name}.kernel"] = Tensor(rng.normal(shape, scale=math.sqrt(2.0 / fan_in)), dtype=dtype)
            params[f"{step.name}.bias"] = Tensor(np.zeros(step.cout), dtype=dtype)
        elif step.kind == "bn":
            params[f"{step.name}.gamma"] = Tensor(np.ones(step.cout), dtype=dtype)
            params[f"{step.name}.beta"] = Tensor(np.zeros(step.cout), dtype=dtype)
            bn[step.name] = BatchNormState()
        elif step.kind == "dense":
            w = rng.normal((step.cin, step.cout), scale=math.sqrt(2.0 / step.cin))
            params[f"{step.name}.weights"] = Tensor(w, dtype=dtype)
            params[f"{step.name}.bias"] = Tensor(np.zeros(step.cout), dtype=dtype)
    for name, t in params.items():
        t.name = name
    return Model(spec, params, bn, plan, steps)


def build_modified_unet(spec: ModelSpec, dtype: str = "f32") -> Model:
    if spec.kind != MODIFIED_UNET:
        raise ConfigError(f"build_modified_unet got a {spec.kind} spec")
    return _build(spec, dtype)


def build_vgg_unet(spec: ModelSpec, dtype: str = "f32") -> Model:
    if spec.kind != VGG_UNET:
        raise ConfigError(f"build_vgg_unet got a {spec.kind} spec")
    return _build(spec, dtype)


def build_model(spec: ModelSpec, dtype: str = "f32") -> Model:
    return build_modified_unet(spec, dtype) if spec.kind == MODIFIED_UNET else build_vgg_unet(spec, dtype)
