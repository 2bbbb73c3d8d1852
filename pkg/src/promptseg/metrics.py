"""Segmentation scoring: confusion matrices, per-class IoU / mIoU, and the
relative-to-oracle generalization score."""

from __future__ import annotations

import numpy as np

IGNORE_INDEX = 255


class ConfusionMatrix:
    """C x C integer counts; rows are ground truth, columns are prediction.

    Ignored ground-truth pixels are excluded. Accumulation over images is
    additive, so per-image matrices can be merged in any order.
    """

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def copy(self) -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts.copy()
        return out

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("class count mismatch")
        self.counts += other.counts
        return self


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    """Add per-pixel (gt, pred) joint counts over non-ignored gt pixels."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    C = cm.num_classes
    valid = gt != IGNORE_INDEX
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= C):
        raise ValueError("ground-truth class out of range")
    if p.size and (p.min() < 0 or p.max() >= C):
        raise ValueError("predicted class out of range")
    cm.counts += np.bincount(C * g + p, minlength=C * C).reshape(C, C)
    return cm


def iou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU and its mean.

    IoU_c = diag_c / (rowsum_c + colsum_c - diag_c). Classes whose
    denominator is zero (never present in gt nor predicted) carry NaN and
    are excluded from the mean.
    """
    counts = cm.counts
    diag = np.diag(counts).astype(np.float64)
    denom = counts.sum(axis=1) + counts.sum(axis=0) - np.diag(counts)
    per_class = np.full(cm.num_classes, np.nan)
    included = denom > 0
    if not included.any():
        raise ValueError("all classes have empty union; nothing to score")
    per_class[included] = diag[included] / denom[included].astype(np.float64)
    return per_class, float(np.nanmean(per_class))


def relative_generalization(gen_miou: float, oracle_miou: float) -> float:
    """Generalization mIoU as a percentage of the oracle, one-decimal rounded."""
    if oracle_miou <= 0:
        raise ValueError("oracle mIoU must be positive")
    return round(100.0 * gen_miou / oracle_miou, 1)
