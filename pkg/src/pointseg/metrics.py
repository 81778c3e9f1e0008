"""Segmentation metrics from a confusion matrix."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError


def confusion_matrix(pred, labels, n_class: int) -> np.ndarray:
    """C x C counts; rows are ground truth, columns are predictions."""
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.shape != labels.shape:
        raise DataError(f"{pred.size} predictions for {labels.size} labels")
    for name, a in (("prediction", pred), ("label", labels)):
        if a.size and (a.min() < 0 or a.max() >= n_class):
            raise DataError(f"{name} outside [0, {n_class})")
    return np.bincount(labels * n_class + pred, minlength=n_class * n_class).reshape(n_class, n_class)


@dataclass
class SegmentationMetrics:
    confusion: np.ndarray
    per_class_iou: np.ndarray  # NaN for classes absent from the ground truth
    miou: float
    oa: float
    macc: float

    @classmethod
    def from_confusion(cls, confusion) -> "SegmentationMetrics":
        cm = np.asarray(confusion, dtype=np.int64)
        tp = np.diag(cm).astype(np.float64)
        gt = cm.sum(axis=1).astype(np.float64)
        predicted = cm.sum(axis=0).astype(np.float64)
        present = gt > 0
        union = gt + predicted - tp
        iou = np.full(len(tp), np.nan)
        iou[present] = tp[present] / union[present]
        total = cm.sum()
        oa = float(tp.sum() / total) if total else 0.0
        # class means use correctly rounded sums, so they do not depend on summation order
        n = int(present.sum())
        miou = math.fsum(iou[present]) / n if n else 0.0
        macc = math.fsum(tp[present] / gt[present]) / n if n else 0.0
        return cls(cm, iou, miou, oa, macc)

    @classmethod
    def from_predictions(cls, pred, labels, n_class: int) -> "SegmentationMetrics":
        return cls.from_confusion(confusion_matrix(pred, labels, n_class))

    def merge(self, other: "SegmentationMetrics") -> "SegmentationMetrics":
        return SegmentationMetrics.from_confusion(self.confusion + other.confusion)

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "oa": self.oa,
            "macc": self.macc,
            "per_class_iou": [None if np.isnan(x) else float(x) for x in self.per_class_iou],
            "confusion": self.confusion.tolist(),
        }
