"""Segmentation and depth metrics, pooled over pixels.

Counts are accumulated over every pixel of a split before any ratio is
formed (micro pooling); class scores are then macro-averaged. Ratios that
would be 0/0 follow one convention throughout:

* class absent from both prediction and ground truth -> 1 for IoU,
  recall and precision (nothing to find, nothing found);
* class present in only one of them -> the undefined ratio is 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from ground truth {gt.shape}")
    return pred, gt


def confusion_counts(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class (TP, FP, FN) pixel counts as int64 arrays of length ``n_classes``."""
    pred, gt = _check_pair(pred, gt)
    p = pred.astype(np.int64).ravel()
    g = gt.astype(np.int64).ravel()
    for name, a in (("prediction", p), ("ground truth", g)):
        if a.size and (a.min() < 0 or a.max() >= n_classes):
            raise ValueError(f"{name} labels must lie in [0, {n_classes})")
    cm = np.bincount(g * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    tp = np.diag(cm).copy()
    return tp, cm.sum(axis=0) - tp, cm.sum(axis=1) - tp


def _ratio(num: np.ndarray, den: np.ndarray, absent: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    out[absent] = 1.0
    return out


@dataclass
class ClassScores:
    iou: np.ndarray
    recall: np.ndarray
    precision: np.ndarray
    absent: np.ndarray  # bool, class in neither prediction nor ground truth

    @property
    def miou(self) -> float:
        return float(self.iou.mean())

    @property
    def mean_recall(self) -> float:
        return float(self.recall.mean())

    @property
    def mean_precision(self) -> float:
        return float(self.precision.mean())


def scores_from_counts(tp, fp, fn) -> ClassScores:
    tp, fp, fn = (np.asarray(a, dtype=np.int64) for a in (tp, fp, fn))
    absent = (tp + fp + fn) == 0
    return ClassScores(iou=_ratio(tp, tp + fp + fn, absent),
                       recall=_ratio(tp, tp + fn, absent),
                       precision=_ratio(tp, tp + fp, absent),
                       absent=absent)


def metrics_multiclass(pred_labels: np.ndarray, gt: np.ndarray, n_classes: int):
    """Return (mIoU, mean recall, mean precision, per-class IoU)."""
    s = scores_from_counts(*confusion_counts(pred_labels, gt, n_classes))
    return s.miou, s.mean_recall, s.mean_precision, s.iou


def binary_iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    pred, gt = _check_pair(pred_mask, gt_mask)
    pred, gt = pred.astype(bool), gt.astype(bool)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def metrics_binary_depth(pred_mask: np.ndarray, pred_depth: np.ndarray, gt_mask: np.ndarray,
                         gt_depth: np.ndarray) -> tuple[float, float]:
    """Defect-class IoU and depth MAE (mm, over all pixels)."""
    _check_pair(pred_depth, gt_depth)
    iou = binary_iou(pred_mask, np.asarray(gt_mask) > 0)
    err = np.abs(np.asarray(pred_depth, dtype=np.float64) - np.asarray(gt_depth, dtype=np.float64))
    return iou, float(err.mean())


def threshold_logits(seg_logit: np.ndarray) -> np.ndarray:
    """sigmoid(z) > 0.5, evaluated as z > 0 to avoid rounding at the boundary."""
    return np.asarray(seg_logit) > 0


@dataclass
class PooledCounts:
    """Running pixel counts for one split."""

    n_classes: int
    tp: np.ndarray = field(init=False)
    fp: np.ndarray = field(init=False)
    fn: np.ndarray = field(init=False)
    abs_error_sum: float = 0.0
    n_pixels: int = 0

    def __post_init__(self):
        self.tp = np.zeros(self.n_classes, dtype=np.int64)
        self.fp = np.zeros(self.n_classes, dtype=np.int64)
        self.fn = np.zeros(self.n_classes, dtype=np.int64)

    def add_labels(self, pred: np.ndarray, gt: np.ndarray) -> None:
        tp, fp, fn = confusion_counts(pred, gt, self.n_classes)
        self.tp += tp
        self.fp += fp
        self.fn += fn

    def add_depth(self, pred_depth: np.ndarray, gt_depth: np.ndarray) -> None:
        pred_depth, gt_depth = _check_pair(pred_depth, gt_depth)
        self.abs_error_sum += float(np.abs(pred_depth.astype(np.float64) - gt_depth).sum())
        self.n_pixels += pred_depth.size

    def scores(self) -> ClassScores:
        return scores_from_counts(self.tp, self.fp, self.fn)

    @property
    def mae(self) -> float:
        if self.n_pixels == 0:
            raise ValueError("no depth pixels accumulated")
        return self.abs_error_sum / self.n_pixels
