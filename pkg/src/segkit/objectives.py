"""Cross-entropy losses and IoU-style evaluation metrics.

Labels are integer class ids ``[N, H, W]``; scores are per-pixel class
probabilities ``[N, H, W, C]``. Losses are averaged over pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, LabelError
from .ops import softmax_array
from .tensor import Tensor, as_tensor, record

LOG_CLAMP = 1e-12


def check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise LabelError(f"label {int(bad)} outside 0..{num_classes - 1}")
    return labels


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = check_labels(labels, num_classes)
    return np.eye(num_classes, dtype=dtype)[labels]


def _check_pair(scores: np.ndarray, targets: np.ndarray):
    if scores.shape[:-1] != targets.shape:
        raise DimensionError(
            f"scores {list(scores.shape)} and targets {list(targets.shape)} disagree on leading axes"
        )


# ---------------------------------------------------------------------------
# losses on plain arrays


def categorical_cross_entropy(scores, targets) -> tuple[float, np.ndarray]:
    """Mean over pixels of ``-log s[target]``.

    Returns the loss and its gradient w.r.t. the pre-softmax logits,
    ``(s - onehot(t)) / pixel_count``.
    """
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores)
    t = np.asarray(targets)
    _check_pair(s, t)
    c = s.shape[-1]
    check_labels(t, c)
    p = np.take_along_axis(s, t[..., None].astype(np.intp), axis=-1)[..., 0]
    loss = float(-np.log(np.maximum(p, LOG_CLAMP)).mean())
    grad = (s - one_hot(t, c, s.dtype)) / t.size
    return loss, grad


def binary_cross_entropy(s1, targets) -> float:
    """Mean of ``-t1 log s1 - (1 - t1) log(1 - s1)``.

    ``s1`` is the score map of class 0 (the first class, e.g. ``building``
    or ``ship``) and ``t1 = (targets == 0)``.
    """
    s1 = np.asarray(s1.data if isinstance(s1, Tensor) else s1)
    t = np.asarray(targets)
    if s1.shape != t.shape:
        raise DimensionError(f"s1 {list(s1.shape)} and targets {list(t.shape)} differ")
    check_labels(t, 2)
    t1 = (t == 0).astype(s1.dtype)
    terms = -t1 * np.log(np.maximum(s1, LOG_CLAMP)) - (1 - t1) * np.log(np.maximum(1 - s1, LOG_CLAMP))
    return float(terms.mean())


# ---------------------------------------------------------------------------
# losses as tape ops


def softmax_cross_entropy(logits, targets, kind: str = "categorical_ce") -> Tensor:
    """Fused softmax + cross entropy on logits ``[N, H, W, C]``.

    ``kind`` selects which formula produces the reported value
    (``binary_ce`` needs C = 2); the gradient is ``(s - t) / pixel_count``
    in both cases.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets)
    s = softmax_array(logits.data)
    if kind == "categorical_ce":
        value, grad = categorical_cross_entropy(s, t)
    elif kind == "binary_ce":
        if s.shape[-1] != 2:
            raise DimensionError(f"binary_ce needs 2 classes, got {s.shape[-1]}")
        _check_pair(s, t)
        value = binary_cross_entropy(s[..., 0], t)
        grad = (s - one_hot(t, 2, s.dtype)) / t.size
    else:
        raise ValueError(f"unknown loss {kind!r}")
    out = Tensor(np.asarray(value, dtype=logits.data.dtype))
    return record(kind, (logits,), out, lambda g: (g * grad,))


def cross_entropy(scores, targets) -> Tensor:
    """Cross entropy on probabilities, differentiable w.r.t. the scores."""
    scores = as_tensor(scores)
    s = scores.data
    t = np.asarray(targets)
    _check_pair(s, t)
    oh = one_hot(t, s.shape[-1], s.dtype)
    safe = np.maximum(s, LOG_CLAMP)
    value = -(oh * np.log(safe)).sum() / t.size
    out = Tensor(np.asarray(value, dtype=s.dtype))
    grad = np.where(s > LOG_CLAMP, -oh / safe, 0.0) / t.size
    return record("cross_entropy", (scores,), out, lambda g: (g * grad,))


# ---------------------------------------------------------------------------
# metrics


def argmax_labels(scores) -> np.ndarray:
    """Per-pixel argmax; ties go to the lowest class id."""
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    return s.argmax(axis=-1).astype(np.int64)


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionCounts":
        z = np.zeros(num_classes, dtype=np.int64)
        return cls(z.copy(), z.copy(), z.copy(), z.copy())


def confusion(pred, gt, num_classes: int) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {list(pred.shape)} and gt {list(gt.shape)} differ")
    check_labels(pred, num_classes)
    check_labels(gt, num_classes)
    cm = np.bincount(
        gt.reshape(-1).astype(np.int64) * num_classes + pred.reshape(-1).astype(np.int64),
        minlength=num_classes * num_classes,
    ).reshape(num_classes, num_classes)
    tp = np.diag(cm).copy()
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = gt.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def jaccard_index(counts: ConfusionCounts, class_id: int) -> float:
    """TP / (TP + FN + FP); 1.0 for a class that is absent and never predicted."""
    tp, fp, fn = int(counts.tp[class_id]), int(counts.fp[class_id]), int(counts.fn[class_id])
    denom = tp + fp + fn
    if denom == 0:
        return 1.0
    return tp / denom


def diff_map(pred, gt) -> np.ndarray:
    """uint8 mask: 0 where prediction matches ground truth, 255 elsewhere."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {list(pred.shape)} and gt {list(gt.shape)} differ")
    return np.where(pred == gt, 0, 255).astype(np.uint8)


@dataclass
class MetricsReport:
    iou: list[float]
    absent: list[bool]
    mean_iou: float
    pixel_acc: float
    counts: ConfusionCounts

    def to_lines(self) -> list[str]:
        c = self.counts
        lines = [
            f"class={k} iou={self.iou[k]:.6f} tp={int(c.tp[k])} fp={int(c.fp[k])} fn={int(c.fn[k])}"
            + (" absent=1" if self.absent[k] else "")
            for k in range(c.num_classes)
        ]
        lines.append(f"mean_iou={self.mean_iou:.6f}")
        lines.append(f"pixel_acc={self.pixel_acc:.6f}")
        return lines

    def to_text(self) -> str:
        rows = ["class      iou        tp        fp        fn"]
        c = self.counts
        for k in range(c.num_classes):
            flag = "  (absent)" if self.absent[k] else ""
            rows.append(
                f"{k:>5} {self.iou[k]:8.4f} {int(c.tp[k]):>9} {int(c.fp[k]):>9} {int(c.fn[k]):>9}{flag}"
            )
        rows.append(f"mean IoU       {self.mean_iou:.4f}")
        rows.append(f"pixel accuracy {self.pixel_acc:.4f}")
        return "\n".join(rows)


def metrics_report(counts: ConfusionCounts) -> MetricsReport:
    k = counts.num_classes
    iou = [jaccard_index(counts, i) for i in range(k)]
    absent = [int(counts.tp[i] + counts.fp[i] + counts.fn[i]) == 0 for i in range(k)]
    total = counts.total
    acc = int(counts.tp.sum()) / total if total else 1.0
    return MetricsReport(iou, absent, float(np.mean(iou)), acc, counts)
