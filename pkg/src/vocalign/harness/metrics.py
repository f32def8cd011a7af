"""Confusion-matrix IoU."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from ..numerics import ShapeError


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """``cm[g, p]`` counts pixels with ground truth ``g`` predicted as ``p``."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    valid = (gt >= 0) & (gt < num_classes)
    idx = num_classes * gt[valid].astype(np.int64) + pred[valid].astype(np.int64)
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where a class is absent from both maps) and their mean.

    The mean is taken over exact count ratios and rounded once, so it does not
    depend on summation order.
    """
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = union > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(present, tp / np.where(present, union, 1), np.nan)
    if not present.any():
        return iou, float("nan")
    ratios = [Fraction(int(t), int(u)) for t, u in zip(tp[present], union[present])]
    return iou, float(sum(ratios) / len(ratios))


@dataclass
class MetricsReport:
    per_class_iou: list[float]
    miou: float
    config: dict = field(default_factory=dict)
    seed: int | None = None
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return {
            "per_class_iou": [None if np.isnan(v) else v for v in self.per_class_iou],
            "miou": self.miou,
            "config": self.config,
            "seed": self.seed,
            "wall_clock": self.wall_clock,
        }


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> MetricsReport:
    """Classes absent from both maps are left out of the mean; predicted-only classes score 0."""
    iou, mean = iou_from_confusion(confusion_matrix(pred, gt, num_classes))
    return MetricsReport([float(v) for v in iou], mean)


def miou_dataset(preds, gts, num_classes: int) -> MetricsReport:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        cm += confusion_matrix(p, g, num_classes)
    iou, mean = iou_from_confusion(cm)
    return MetricsReport([float(v) for v in iou], mean)
