"""Acceptance criteria 1-10, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` (lines are also repeated in
the pytest terminal summary) or directly with ``python3 tests/test_acceptance.py``.
Criteria 5-7 train real models and take roughly 45 minutes together on one core.
"""

import itertools
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from segkit.architectures import ModelSpec, build_model, conv_count, describe, shape_plan
from segkit.data import split_dataset, synth_scenes
from segkit.engine import TrainConfig, checkpoint_bytes, checkpoint_from_bytes, train
from segkit.experiments import generalize_ships, multilabel_vgg, overfit_ships
from segkit.verify import (
    MODEL_TOL,
    PRIMITIVE_TOL,
    adjointness_gap,
    gradcheck_suite,
    loss_identity_gap,
    metric_oracle_mismatches,
    tiling_failures,
    uniform_loss_gap,
)
from segkit.objectives import ConfusionCounts, jaccard_index

RESULTS: list[str] = []
GOLDEN = Path(__file__).parent / "golden"


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line


def ticking():
    c = itertools.count()
    return lambda: float(next(c))


def test_criterion_01_gradient_correctness():
    t0 = time.perf_counter()
    results = gradcheck_suite()
    secs = time.perf_counter() - t0
    prim = max(r.value for r in results[:-1])
    model = results[-1].value
    ok = prim < PRIMITIVE_TOL and model < MODEL_TOL and secs < 120
    report(1, ok, f"primitives max rel err {prim:.2e} (<1e-6, {len(results) - 1} ops), width-1/16 U-Net {model:.2e} (<1e-4), {secs:.1f}s (<120s)")


def test_criterion_02_loss_identities():
    gap = loss_identity_gap(trials=1000)
    uni = uniform_loss_gap()
    report(2, gap < 1e-9 and uni < 1e-12, f"|BCE - CCE| max {gap:.2e} (<1e-9) over 1000 batches; |uniform - ln C| max {uni:.2e} (<1e-12)")


def test_criterion_03_metric_oracle():
    bad = metric_oracle_mismatches(trials=1000)
    c = ConfusionCounts(np.array([3]), np.array([1]), np.array([1]), np.array([0]))
    iou = jaccard_index(c, 0)
    report(3, bad == 0 and iou == 0.6, f"{bad} mismatches in 1000 random 32x32 pairs; IoU(3,1,1) = {iou!r}")


def test_criterion_04_adjointness():
    gap = adjointness_gap(trials=100)
    report(4, gap < 1e-10, f"max relative adjoint gap {gap:.2e} (<1e-10) over 100 trials")


@pytest.fixture(scope="module")
def overfit_runs():
    first = overfit_ships(epochs=200, seed=0, clock=ticking())
    return first


def test_criterion_05_overfit(overfit_runs):
    r = overfit_runs
    iou = r.history[-1].train_iou[0]
    ok = iou >= 0.95 and r.seconds < 600 and len(r.history) <= 200
    report(5, ok, f"training foreground IoU {iou:.4f} (>=0.95) after {len(r.history)} epochs, {r.seconds:.0f}s (<600s)")


def test_criterion_06_generalization():
    r = generalize_ships(epochs=120, seed=0)
    tr, va = r.history[-1].train_iou[0], r.history[-1].val_iou[0]
    ok = va >= 0.90 and abs(tr - va) <= 0.10 and r.seconds < 3600
    report(6, ok, f"validation foreground IoU {va:.4f} (>=0.90), train {tr:.4f}, gap {abs(tr - va):.4f} (<=0.10), {r.seconds / 60:.1f} min (<60)")


def test_criterion_07_multilabel():
    seen = []
    r = multilabel_vgg(epochs=120, seed=0, callback=seen.append)
    miou = r.history[-1].val_miou
    ok = miou >= 0.80 and len(seen) == 120 and seen == list(r.history) and r.seconds < 3600
    per_class = ", ".join(f"{v:.3f}" for v in r.history[-1].val_iou)
    report(7, ok, f"mean validation IoU {miou:.4f} (>=0.80) [{per_class}], {len(seen)} callback entries, {r.seconds / 60:.1f} min (<60)")


def test_criterion_08_architecture():
    unet = ModelSpec("modified_unet", 512, 512, 1, 2)
    vgg = ModelSpec("vgg_unet", 512, 512, 3, 5)
    up, vp = shape_plan(unet), shape_plan(vgg)
    trans = [(r.in_shape, r.out_shape) for r in up]
    chain = ((512, 512, 1), (512, 512, 64)) in trans and ((512, 512, 64), (256, 256, 64)) in trans
    enc_blocks = len({r.block for r in vp if r.section == "encoder"})
    dec_blocks = len({r.block for r in vp if r.section == "decoder"})
    golden = describe(unet) + "\n" == (GOLDEN / "describe_modified_unet_512x512x1.txt").read_text() and describe(
        vgg
    ) + "\n" == (GOLDEN / "describe_vgg_unet_512x512x3.txt").read_text()
    counts = (conv_count(up), conv_count(vp, ("encoder",)), conv_count(vp, ("decoder",)))
    ok = counts == (10, 13, 13) and enc_blocks == dec_blocks == 5 and chain and golden
    report(8, ok, f"conv counts U-Net/VGG-enc/VGG-dec {counts}, VGG blocks {enc_blocks}/{dec_blocks}, 512x512x1 chain {chain}, golden describe {golden}")


def test_criterion_09_pipeline():
    bad = tiling_failures(trials=50)
    s = split_dataset(list(range(200)), Fraction(4, 5), 0)
    spec = ModelSpec("modified_unet", 64, 64, 1, 2, Fraction(1, 16), seed=1)
    data = split_dataset(synth_scenes("ships_optical", 8, 64, 1), seed=1)
    cfg = lambda n: TrainConfig(epochs=n, batch_size=3, loss="binary_ce", seed=2)  # noqa: E731
    five, _ = train(build_model(spec), data, cfg(5), clock=ticking())
    three, _ = train(build_model(spec), data, cfg(3), clock=ticking())
    three = checkpoint_from_bytes(checkpoint_bytes(three))
    resumed, _ = train(build_model(spec), data, cfg(5), resume=three, clock=ticking())
    same = checkpoint_bytes(five) == checkpoint_bytes(resumed)
    ok = bad == 0 and (len(s.train), len(s.validation)) == (160, 40) and same
    report(9, ok, f"tile/stitch failures {bad}/50, split {len(s.train)}/{len(s.validation)}, 3+2 vs 5 epoch resume bit-exact {same}")


def test_criterion_10_determinism(overfit_runs):
    again = overfit_ships(epochs=200, seed=0, clock=ticking())
    a, b = overfit_runs, again
    same_ckpt = checkpoint_bytes(a.checkpoint) == checkpoint_bytes(b.checkpoint)
    same_hist = a.history.to_csv() == b.history.to_csv()
    report(10, same_ckpt and same_hist, f"criterion-5 rerun: checkpoints identical {same_ckpt}, History identical {same_hist}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
