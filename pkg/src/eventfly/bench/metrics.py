"""Confusion-matrix segmentation metrics."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass

import numpy as np

from ..blend import IGNORE, LabelMap
from ..errors import DomainError, EventFlyWarning, ShapeError


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns predictions."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def update(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred.data if isinstance(pred, LabelMap) else pred)
        gt = np.asarray(gt.data if isinstance(gt, LabelMap) else gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        c = self.num_classes
        keep = gt != IGNORE
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        if np.any(g >= c) or np.any(p >= c) or np.any(p < 0):
            raise DomainError(f"class id outside 0..{c - 1} at a scored pixel")
        self.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ShapeError("confusion matrices of different size")
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.update(pred, gt)


def metrics(cm: ConfusionMatrix | np.ndarray) -> dict:
    """Acc, mAcc, mIoU, fIoU (fractions in [0, 1]) plus per-class IoU.

    Classes with no ground-truth pixels are left out of mAcc; classes absent from
    both ground truth and prediction are left out of mIoU (their IoU is NaN).
    """
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    counts = counts.astype(np.float64)
    diag = np.diag(counts)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    total = rows.sum()
    n = counts.shape[0]
    if total == 0:
        warnings.warn("empty confusion matrix; all metrics are 0", EventFlyWarning, stacklevel=2)
        return {"acc": 0.0, "macc": 0.0, "miou": 0.0, "fiou": 0.0, "iou": [float("nan")] * n}
    union = rows + cols - diag
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, diag / union, np.nan)
        cls_acc = np.where(rows > 0, diag / rows, np.nan)
    present = union > 0
    return {
        "acc": float(diag.sum() / total),
        "macc": float(np.nanmean(cls_acc)) if np.any(rows > 0) else 0.0,
        "miou": float(iou[present].mean()) if present.any() else 0.0,
        "fiou": float(np.sum((rows / total)[present] * iou[present])),
        "iou": [float(v) for v in iou],
    }


def metrics_json(result: dict, method: str = "") -> str:
    return json.dumps({"method": method, **result}, indent=2, allow_nan=True)


def metrics_csv(rows: list[tuple[str, dict]], class_names) -> str:
    """Table with one row per method: Acc, mAcc, mIoU, fIoU then per-class IoU, in percent."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "Acc", "mAcc", "mIoU", "fIoU", *class_names])
    for method, m in rows:
        pct = lambda v: "" if v != v else f"{100 * v:.2f}"  # noqa: E731  NaN -> blank
        w.writerow([method, *(pct(m[k]) for k in ("acc", "macc", "miou", "fiou")), *(pct(v) for v in m["iou"])])
    return buf.getvalue()
