"""Self-check suites run by ``segkit verify`` and reused by the tests.

``gradcheck`` compares every differentiable op (and a small composed
modified U-Net) against central differences in f64. ``oracles`` checks
loss identities, metric counting, conv adjointness and pipeline exactness
against independent brute-force computations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from . import ops
from .architectures import ModelSpec, build_model
from .data import split_dataset, stitch_tiles, tile_raster
from .gradcheck import grad_check
from .objectives import (
    binary_cross_entropy,
    categorical_cross_entropy,
    confusion,
    cross_entropy,
    jaccard_index,
    softmax_cross_entropy,
    ConfusionCounts,
)
from .rng import RngStream
from .tensor import Tensor

PRIMITIVE_TOL = 1e-6
MODEL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3e} (tol {self.tolerance:.0e})"


def _t(rng, shape, shift=0.0):
    return Tensor(rng.normal(shape) + shift, dtype="f64")


def _scalar(y: Tensor, seed: int) -> Tensor:
    """Random projection so every output coordinate matters."""
    w = RngStream(seed, 99).normal(y.shape)
    return ops.weighted_sum(y, w)


def _distinct(rng, shape):
    # well separated values keep max-pool and relu away from their kinks
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2 + 0.5) * 0.1
    return Tensor(vals.reshape(shape), dtype="f64")


def _primitive_cases() -> list[tuple[str, Callable[[], float]]]:
    r = RngStream(1234)
    cases = []

    def add(name, fn):
        cases.append((name, fn))

    a, b = _t(r, (2, 3, 4)), _t(r, (2, 3, 4))
    add("add", lambda: grad_check(lambda x, y: _scalar(ops.add(x, y), 0), [a, b]))
    add("mul", lambda: grad_check(lambda x, y: _scalar(ops.mul(x, y), 1), [a, b]))
    add("sum", lambda: grad_check(lambda x: ops.sum(ops.mul(x, x)), [a]))
    add("mean", lambda: grad_check(lambda x: ops.mean(ops.mul(x, x)), [a]))

    x = _t(r, (2, 5, 6, 6))
    k1, b1 = _t(r, (3, 3, 6, 4)), _t(r, (4,))
    add("conv2d 3x3 pad 1", lambda: grad_check(lambda x, k, b: _scalar(ops.conv2d(x, k, b, 1, 1), 2), [x, k1, b1]))
    add("conv2d 3x3 valid", lambda: grad_check(lambda x, k: _scalar(ops.conv2d(x, k, None, 1, 0), 3), [x, k1]))
    xs = _t(r, (2, 5, 6, 2))
    k2 = _t(r, (3, 3, 2, 3))
    add("conv2d small cin", lambda: grad_check(lambda x, k: _scalar(ops.conv2d(x, k, None, 1, 1), 4), [xs, k2]))
    x7 = _t(r, (2, 5, 7, 6))
    add("conv2d stride 2", lambda: grad_check(lambda x, k: _scalar(ops.conv2d(x, k, None, 2, 1), 5), [x7, k1]))
    k3, b3 = _t(r, (1, 1, 6, 3)), _t(r, (3,))
    add("conv2d 1x1", lambda: grad_check(lambda x, k, b: _scalar(ops.conv2d(x, k, b), 6), [x, k3, b3]))

    xt = _t(r, (2, 3, 4, 5))
    kt, bt = _t(r, (2, 2, 3, 5)), _t(r, (3,))
    add("conv_transpose2d 2x2", lambda: grad_check(lambda x, k, b: _scalar(ops.conv_transpose2d(x, k, b, 2), 7), [xt, kt, bt]))
    kt3 = _t(r, (3, 3, 2, 5))
    add("conv_transpose2d 3x3", lambda: grad_check(lambda x, k: _scalar(ops.conv_transpose2d(x, k, None, 2), 8), [xt, kt3]))

    xd, wd, bd = _t(r, (7, 5)), _t(r, (5, 3)), _t(r, (3,))
    add("dense", lambda: grad_check(lambda x, w, b: _scalar(ops.dense(x, w, b), 9), [xd, wd, bd]))

    xp = _distinct(r, (2, 6, 6, 3))
    add("maxpool2d 2x2", lambda: grad_check(lambda x: _scalar(ops.maxpool2d(x, 2)[0], 10), [xp]))
    xp3 = _distinct(r, (1, 6, 6, 2))
    add("maxpool2d 3x3", lambda: grad_check(lambda x: _scalar(ops.maxpool2d(x, 3)[0], 11), [xp3]))
    add("relu", lambda: grad_check(lambda x: _scalar(ops.relu(x), 12), [xp]))

    xb, g, be = _t(r, (3, 4, 4, 3)), _t(r, (3,), 1.0), _t(r, (3,))
    add(
        "batchnorm2d train",
        lambda: grad_check(lambda x, g, b: _scalar(ops.batchnorm2d(x, g, b, ops.BatchNormState(), ops.TRAIN), 13), [xb, g, be]),
    )
    st = ops.BatchNormState(np.array([0.1, -0.2, 0.3]), np.array([1.5, 0.7, 2.0]))
    add("batchnorm2d infer", lambda: grad_check(lambda x, g, b: _scalar(ops.batchnorm2d(x, g, b, st, ops.INFER), 14), [xb, g, be]))

    xo = _t(r, (2, 4, 4, 3))
    add("dropout", lambda: grad_check(lambda x: _scalar(ops.dropout(x, 0.3, RngStream(5), ops.TRAIN), 15), [xo]))
    xc = _t(r, (2, 4, 4, 2))
    add("concat_channels", lambda: grad_check(lambda x, y: _scalar(ops.concat_channels(x, y), 16), [xo, xc]))
    add("slice_channels", lambda: grad_check(lambda x: _scalar(ops.slice_channels(x, 1, 3), 17), [xo]))
    add("reshape", lambda: grad_check(lambda x: _scalar(ops.reshape(x, (8, 12)), 18), [xo]))
    add("softmax_channels", lambda: grad_check(lambda x: _scalar(ops.softmax_channels(x), 19), [xo]))

    labels3 = RngStream(7).integers(0, 3, (2, 4, 4))
    labels2 = RngStream(8).integers(0, 2, (2, 4, 4))
    xl2 = _t(r, (2, 4, 4, 2))
    add("softmax_cross_entropy categorical", lambda: grad_check(lambda z: softmax_cross_entropy(z, labels3), [xo]))
    add("softmax_cross_entropy binary", lambda: grad_check(lambda z: softmax_cross_entropy(z, labels2, "binary_ce"), [xl2]))
    add("cross_entropy", lambda: grad_check(lambda z: cross_entropy(ops.softmax_channels(z), labels3), [xo]))
    return cases


def model_gradcheck(max_entries: int = 4) -> float:
    """End-to-end check of a width-1/16 modified U-Net at 16x16 (the minimum for 4 pools)."""
    spec = ModelSpec("modified_unet", 16, 16, 1, 2, Fraction(1, 16), dropout_rate=0.2, seed=3)
    model = build_model(spec, "f64")
    x = Tensor(RngStream(4).uniform(0, 1, (2, 16, 16, 1)), dtype="f64")
    y = RngStream(5).integers(0, 2, (2, 16, 16))
    params = list(model.params.values())

    def build(xx):
        return softmax_cross_entropy(model.logits(xx, ops.TRAIN, RngStream(6)), y, "binary_ce")

    return grad_check(build, [x], wrt=params, max_entries=max_entries)


def gradcheck_suite(include_model: bool = True) -> list[CheckResult]:
    out = []
    for name, fn in _primitive_cases():
        err = fn()
        out.append(CheckResult(name, err, PRIMITIVE_TOL, err < PRIMITIVE_TOL))
    if include_model:
        err = model_gradcheck()
        out.append(CheckResult("modified U-Net width 1/16", err, MODEL_TOL, err < MODEL_TOL))
    return out


# ---------------------------------------------------------------------------
# oracles


def loss_identity_gap(trials: int = 1000, seed: int = 0) -> float:
    """max |binary CE - categorical CE| over random 2-class pixel batches."""
    rng = RngStream(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 65))
        s0 = rng.uniform(1e-6, 1 - 1e-6, n)
        scores = np.stack([s0, 1 - s0], axis=-1)
        t = rng.integers(0, 2, n)
        worst = max(worst, abs(binary_cross_entropy(s0, t) - categorical_cross_entropy(scores, t)[0]))
    return worst


def uniform_loss_gap(max_classes: int = 12) -> float:
    worst = 0.0
    for c in range(2, max_classes + 1):
        t = np.arange(64) % c
        loss = categorical_cross_entropy(np.full((64, c), 1.0 / c), t)[0]
        worst = max(worst, abs(loss - math.log(c)))
    return worst


def _count_oracle(pred, gt, num_classes):
    tp = [0] * num_classes
    fp = [0] * num_classes
    fn = [0] * num_classes
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p == g:
            tp[p] += 1
        else:
            fp[p] += 1
            fn[g] += 1
    return tp, fp, fn


def metric_oracle_mismatches(trials: int = 1000, seed: int = 0) -> int:
    """Number of random 32x32 mask pairs where counts or IoU differ from a per-pixel tally."""
    rng = RngStream(seed)
    bad = 0
    for _ in range(trials):
        k = int(rng.integers(2, 6))
        pred = rng.integers(0, k, (32, 32))
        gt = rng.integers(0, k, (32, 32))
        c = confusion(pred, gt, k)
        tp, fp, fn = _count_oracle(pred, gt, k)
        ok = list(c.tp) == tp and list(c.fp) == fp and list(c.fn) == fn
        for j in range(k):
            den = tp[j] + fp[j] + fn[j]
            ok &= jaccard_index(c, j) == (tp[j] / den if den else 1.0)
        bad += not ok
    return bad


def adjointness_gap(trials: int = 100, seed: int = 0) -> float:
    """max relative |<conv(x), y> - <x, conv_transpose(y)>| over odd unpadded kernels and strides 1-3."""
    rng = RngStream(seed)
    worst = 0.0
    for _ in range(trials):
        k = 2 * int(rng.integers(0, 3)) + 1
        s = int(rng.integers(1, 4))
        ho, wo = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        cin, cout = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        n = int(rng.integers(1, 3))
        h, w = (ho - 1) * s + k, (wo - 1) * s + k
        x = rng.normal((n, h, w, cin))
        y = rng.normal((n, ho, wo, cout))
        kern = rng.normal((k, k, cin, cout))
        lhs = float(np.vdot(ops.conv2d(Tensor(x, "f64"), Tensor(kern, "f64"), None, s, 0).data, y))
        rhs = float(np.vdot(x, ops.conv_transpose2d(Tensor(y, "f64"), Tensor(kern, "f64"), None, s).data))
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
    return worst


def tiling_failures(trials: int = 50, seed: int = 0) -> int:
    """Random sizes where tile -> stitch is not the identity or coverage is incomplete."""
    rng = RngStream(seed)
    bad = 0
    for _ in range(trials):
        tile = int(rng.integers(4, 33))
        h, w = int(rng.integers(tile, 3 * tile + 7)), int(rng.integers(tile, 3 * tile + 7))
        overlap = int(rng.integers(0, tile))
        img = rng.integers(0, 256, (h, w, 3)).astype(np.uint8)
        mask = rng.integers(0, 5, (h, w)).astype(np.uint8)
        tiles = tile_raster(img, mask, tile, overlap)
        hits = np.zeros((h, w), dtype=np.int64)
        for t in tiles:
            r, c = t.origin
            hits[r : r + tile, c : c + tile] += 1
        same = np.array_equal(stitch_tiles(tiles, (h, w)), mask) and np.array_equal(
            stitch_tiles(tiles, (h, w), layer="image"), img
        )
        bad += not (same and hits.min() >= 1)
    return bad


def oracle_suite() -> list[CheckResult]:
    out = []
    g = loss_identity_gap()
    out.append(CheckResult("binary CE == categorical CE (C=2)", g, 1e-9, g < 1e-9))
    g = uniform_loss_gap()
    out.append(CheckResult("uniform scores -> ln C", g, 1e-12, g < 1e-12))
    bad = metric_oracle_mismatches()
    out.append(CheckResult("confusion/IoU vs per-pixel tally", bad, 0, bad == 0))
    c = ConfusionCounts(np.array([3, 0]), np.array([1, 0]), np.array([1, 0]), np.array([0, 0]))
    iou = jaccard_index(c, 0)
    out.append(CheckResult("IoU(TP=3, FP=1, FN=1) == 0.6", abs(iou - 0.6), 0, iou == 0.6))
    g = adjointness_gap()
    out.append(CheckResult("<conv x, y> == <x, conv_transpose y>", g, 1e-10, g < 1e-10))
    bad = tiling_failures()
    out.append(CheckResult("tile -> stitch identity and coverage", bad, 0, bad == 0))
    sset = split_dataset(list(range(200)), Fraction(4, 5), 0)
    n_train = len(sset.train)
    out.append(CheckResult("200-scene split is 160/40", abs(n_train - 160), 0, n_train == 160 and len(sset.validation) == 40))
    return out


SUITES = {"gradcheck": gradcheck_suite, "oracles": oracle_suite}
