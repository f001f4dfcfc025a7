"""Confusion matrices and (mean) intersection over union."""

from __future__ import annotations

from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .tensor import DomainError, ShapeError


class ConfusionMatrix:
    """K x K pixel counts, rows = ground truth, columns = prediction.

    ``unknown`` (if given) is left out of the active classes; pixels flagged
    invalid are never counted.
    """

    def __init__(self, num_classes: int, unknown: Optional[int] = None):
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.unknown = unknown

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def active(self) -> List[int]:
        return [c for c in range(self.num_classes) if c != self.unknown]

    def accumulate(self, pred: np.ndarray, gt: np.ndarray, valid: Optional[np.ndarray] = None) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        keep = np.ones(gt.shape, bool) if valid is None else np.asarray(valid, bool)
        if keep.shape != gt.shape:
            raise ShapeError(f"valid mask {keep.shape} does not match {gt.shape}")
        if self.unknown is not None:
            keep = keep & (gt != self.unknown)
        k = self.num_classes
        p, g = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
        if p.size and (p.min() < 0 or p.max() >= k or g.min() < 0 or g.max() >= k):
            raise ValueError(f"class index outside [0, {k})")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes, self.unknown)
        out.counts = self.counts + other.counts
        return out

    __add__ = merge


def confusion_accumulate(cm: ConfusionMatrix, pred, gt, valid=None) -> ConfusionMatrix:
    return cm.accumulate(pred, gt, valid)


def miou(cm: ConfusionMatrix, absent_as_zero: bool = False) -> Tuple[List[float], float]:
    """Per-class IoU (NaN for inactive or unobserved classes) and their mean.

    Classes with TP + FP + FN = 0 are dropped from the mean unless
    ``absent_as_zero``, in which case they count as 0. The mean is taken over
    exact count ratios and rounded once.
    """
    c = cm.counts
    active = cm.active
    # rows of unknown ground truth are never filled; an unknown prediction counts as a miss
    sub = c[np.ix_(active, active)]
    tp = np.diag(sub)
    fp = sub.sum(axis=0) - tp
    fn = c[active].sum(axis=1) - tp
    denom = tp + fp + fn
    ious = [float("nan")] * cm.num_classes
    vals = []
    for i, cls in enumerate(active):
        if denom[i] > 0:
            ratio = Fraction(int(tp[i]), int(denom[i]))
            ious[cls] = float(ratio)
            vals.append(ratio)
        elif absent_as_zero:
            ious[cls] = 0.0
            vals.append(Fraction(0))
    if not vals:
        raise DomainError("no active classes observed")
    return ious, float(sum(vals) / len(vals))


def report(cm: ConfusionMatrix, names: Sequence[str], absent_as_zero: bool = False) -> str:
    ious, mean = miou(cm, absent_as_zero)
    lines = ["class,name,iou"]
    for cls in cm.active:
        v = ious[cls]
        lines.append(f"{cls},{names[cls]},{'nan' if np.isnan(v) else f'{v:.6f}'}")
    lines.append(f"miou,{mean:.6f}")
    return "\n".join(lines) + "\n"
