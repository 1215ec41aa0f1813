"""Confusion matrix and mean intersection-over-union.

Ground-truth pixels equal to the neutral sentinel are excluded everywhere.
A neutral prediction on a labelled ground-truth pixel is a false negative of
the ground-truth class; the confusion matrix only counts class predictions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from affinity_refine.constants import NEUTRAL_LABEL
from affinity_refine.errors import ArgumentError
from affinity_refine.tensor_core import LabelMap, validate_labels


@dataclass(frozen=True, slots=True)
class MiouResult:
    per_class: tuple[float | None, ...]  # None for classes absent from both maps
    mean: float
    classes: tuple[int, ...]  # classes the mean is taken over

    def to_dict(self) -> dict[str, object]:
        return {
            "miou": self.mean,
            "per_class_iou": list(self.per_class),
            "classes": list(self.classes),
        }


def _check(pred: LabelMap, gt: LabelMap, num_classes: int) -> None:
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ArgumentError(
            f"pred is {pred.height}x{pred.width} but gt is {gt.height}x{gt.width}"
        )
    validate_labels(pred, num_classes)
    validate_labels(gt, num_classes)


def confusion(pred: LabelMap, gt: LabelMap, num_classes: int) -> np.ndarray:
    """C x C counts; rows are ground truth, columns predictions."""
    _check(pred, gt, num_classes)
    g = gt.labels.reshape(-1)
    p = pred.labels.reshape(-1)
    keep = (g != NEUTRAL_LABEL) & (p != NEUTRAL_LABEL)
    idx = num_classes * g[keep].astype(np.int64) + p[keep].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou_from_counts(matrix: np.ndarray, gt_totals: np.ndarray) -> MiouResult:
    """IoU per class from a confusion matrix and per-class labelled gt totals.

    ``gt_totals`` can exceed the row sums of ``matrix`` by the neutral
    predictions, which count as false negatives.
    """
    tp = np.diag(matrix).astype(np.int64)
    fp = matrix.sum(axis=0) - tp
    fn = gt_totals - tp
    pred_totals = matrix.sum(axis=0)
    per_class: list[float | None] = []
    present: list[int] = []
    for c in range(matrix.shape[0]):
        if gt_totals[c] == 0 and pred_totals[c] == 0:
            per_class.append(None)
            continue
        present.append(c)
        per_class.append(float(tp[c]) / float(tp[c] + fp[c] + fn[c]))
    values = [v for v in per_class if v is not None]
    mean = float(sum(values) / len(values)) if values else 0.0
    return MiouResult(tuple(per_class), mean, tuple(present))


def miou(pred: LabelMap, gt: LabelMap, num_classes: int) -> MiouResult:
    """Mean IoU over classes present in the ground truth or the prediction.

    Returns a mean of 0.0 with no classes when every ground-truth pixel is neutral.
    """
    matrix = confusion(pred, gt, num_classes)
    g = gt.labels.reshape(-1)
    gt_totals = np.bincount(g[g != NEUTRAL_LABEL].astype(np.int64), minlength=num_classes)
    return miou_from_counts(matrix, gt_totals)
