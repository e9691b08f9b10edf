import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from segkit.errors import DimensionError, LabelError
from segkit.objectives import (
    ConfusionCounts,
    argmax_labels,
    binary_cross_entropy,
    categorical_cross_entropy,
    confusion,
    diff_map,
    jaccard_index,
    metrics_report,
    softmax_cross_entropy,
)
from segkit.ops import softmax_array
from segkit.verify import _count_oracle, loss_identity_gap


def test_ce_perfect_is_zero():
    s = np.array([[0.0, 1.0, 0.0]])
    assert categorical_cross_entropy(s, np.array([1]))[0] == 0.0


def test_ce_uniform_is_ln_c():
    loss, _ = categorical_cross_entropy(np.full((10, 4), 0.25), np.arange(10) % 4)
    assert abs(loss - math.log(4)) < 1e-12
    assert round(loss, 6) == 1.386294


def test_ce_single_pixel():
    loss, _ = categorical_cross_entropy(np.array([[0.7, 0.2, 0.1]]), np.array([0]))
    assert round(loss, 6) == 0.356675


def test_ce_clamps_zero_probability():
    loss, _ = categorical_cross_entropy(np.array([[1.0, 0.0]]), np.array([1]))
    assert loss == pytest.approx(-math.log(1e-12))


def test_ce_gradient_is_s_minus_t_over_p():
    s = softmax_array(np.random.default_rng(0).normal(size=(2, 3, 3)))
    t = np.array([[0, 1, 2], [2, 2, 0]])
    _, g = categorical_cross_entropy(s, t)
    want = s.copy()
    for idx in np.ndindex(t.shape):
        want[idx + (t[idx],)] -= 1
    np.testing.assert_allclose(g, want / t.size, rtol=1e-14)


def test_ce_label_out_of_range():
    with pytest.raises(LabelError):
        categorical_cross_entropy(np.full((2, 2), 0.5), np.array([0, 2]))


def test_bce_examples():
    assert binary_cross_entropy(np.array([1.0]), np.array([0])) == 0.0  # t1 = 1 for class 0
    assert round(binary_cross_entropy(np.array([0.5]), np.array([1])), 6) == 0.693147


def test_bce_shape_mismatch():
    with pytest.raises(DimensionError):
        binary_cross_entropy(np.ones(3) * 0.5, np.zeros(4, int))


def test_bce_equals_categorical_1000_batches():
    assert loss_identity_gap(trials=1000, seed=3) < 1e-9


@given(st.integers(0, 10**6), st.integers(2, 5))
def test_loss_nonnegative_and_zero_iff_onehot(seed, c):
    r = np.random.default_rng(seed)
    t = r.integers(0, c, 12)
    s = softmax_array(r.normal(size=(12, c)))
    assert categorical_cross_entropy(s, t)[0] >= 0
    assert categorical_cross_entropy(np.eye(c)[t], t)[0] == 0


def test_fused_tape_loss_value():
    z = np.random.default_rng(1).normal(size=(1, 2, 2, 3))
    t = np.array([[[0, 1], [2, 1]]])
    from segkit.tensor import Tensor

    out = softmax_cross_entropy(Tensor(z, "f64"), t)
    assert out.item() == pytest.approx(categorical_cross_entropy(softmax_array(z), t)[0], rel=1e-14)


# ---------------------------------------------------------------------------
# metrics


def counts(tp, fp, fn):
    return ConfusionCounts(np.array([tp]), np.array([fp]), np.array([fn]), np.array([0]))


def test_jaccard_examples():
    assert jaccard_index(counts(3, 1, 1), 0) == 0.6
    assert jaccard_index(counts(5, 0, 0), 0) == 1.0
    assert jaccard_index(counts(0, 2, 1), 0) == 0.0
    assert jaccard_index(counts(0, 0, 0), 0) == 1.0


def test_confusion_perfect():
    m = np.random.default_rng(2).integers(0, 3, (8, 8))
    c = confusion(m, m, 3)
    assert not c.fp.any() and not c.fn.any()


def test_confusion_disjoint_single_class():
    c = confusion(np.zeros((4, 4), int), np.ones((4, 4), int), 2)
    assert c.tp.tolist() == [0, 0]


def test_confusion_out_of_range():
    with pytest.raises(LabelError):
        confusion(np.array([0, 3]), np.array([0, 1]), 3)


@given(st.integers(0, 10**6), st.integers(2, 6))
def test_confusion_matches_per_pixel_oracle(seed, k):
    r = np.random.default_rng(seed)
    pred, gt = r.integers(0, k, (16, 16)), r.integers(0, k, (16, 16))
    c = confusion(pred, gt, k)
    tp, fp, fn = _count_oracle(pred, gt, k)
    assert c.tp.tolist() == tp and c.fp.tolist() == fp and c.fn.tolist() == fn
    assert np.all(c.tp + c.fp + c.fn + c.tn == pred.size)
    assert int((c.tp + c.fn).sum()) == pred.size


@given(st.integers(0, 10**6), st.permutations(range(4)))
def test_jaccard_relabel_invariant(seed, perm):
    r = np.random.default_rng(seed)
    pred, gt = r.integers(0, 4, (8, 8)), r.integers(0, 4, (8, 8))
    p = np.array(perm)
    a, b = confusion(pred, gt, 4), confusion(p[pred], p[gt], 4)
    for k in range(4):
        assert jaccard_index(a, k) == jaccard_index(b, p[k])


def test_argmax_ties_to_lowest():
    assert argmax_labels(np.array([[0.5, 0.5], [0.2, 0.8]])).tolist() == [0, 1]


def test_diff_map_examples():
    gt = np.random.default_rng(3).integers(0, 2, (6, 6))
    assert not diff_map(gt, gt).any()
    assert np.all(diff_map(1 - gt, gt) == 255)


@given(st.integers(0, 10**6))
def test_diff_map_counts(seed):
    r = np.random.default_rng(seed)
    pred, gt = r.integers(0, 2, (10, 10)), r.integers(0, 2, (10, 10))
    d = diff_map(pred, gt)
    c = confusion(pred, gt, 2)
    assert int((d > 0).sum()) == int((pred != gt).sum()) == int(c.fp.sum() + c.fn.sum()) // 2


def test_diff_map_shape_mismatch():
    with pytest.raises(DimensionError):
        diff_map(np.zeros((2, 2)), np.zeros((2, 3)))


def test_report_perfect():
    m = np.random.default_rng(4).integers(0, 3, (5, 5))
    rep = metrics_report(confusion(m, m, 3))
    assert rep.iou == [1.0, 1.0, 1.0] and rep.mean_iou == 1.0 and rep.pixel_acc == 1.0


def test_report_absent_class_flagged():
    m = np.zeros((4, 4), int)
    rep = metrics_report(confusion(m, m, 3))
    assert rep.iou == [1.0, 1.0, 1.0]
    assert rep.absent == [False, True, True]


@given(st.integers(0, 10**6))
def test_report_brute_force(seed):
    r = np.random.default_rng(seed)
    pred, gt = r.integers(0, 3, (12, 12)), r.integers(0, 3, (12, 12))
    rep = metrics_report(confusion(pred, gt, 3))
    for k in range(3):
        inter = np.sum((pred == k) & (gt == k))
        union = np.sum((pred == k) | (gt == k))
        assert rep.iou[k] == (inter / union if union else 1.0)
    assert rep.pixel_acc == np.mean(pred == gt)
    assert 0 <= rep.mean_iou <= 1
    assert (rep.mean_iou == 1) == bool(np.array_equal(pred, gt))


def test_report_lines_format():
    rep = metrics_report(counts(3, 1, 1))
    lines = rep.to_lines()
    assert lines[0] == "class=0 iou=0.600000 tp=3 fp=1 fn=1"
    assert lines[-2].startswith("mean_iou=") and lines[-1].startswith("pixel_acc=")
