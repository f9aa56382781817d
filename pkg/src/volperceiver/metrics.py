"""Confusion-matrix based segmentation metrics.

Undefined ratios (0/0) come back as NaN rather than 0 so that a class the
model never predicts reports F1 = NaN and drags MeanF1 to NaN with it.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def confusion_matrix(truth: np.ndarray, pred: np.ndarray, num_classes: int) -> np.ndarray:
    """Entry (i, j) counts pixels of true class i predicted as j."""
    truth = np.asarray(truth).reshape(-1).astype(np.int64)
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    if truth.shape != pred.shape:
        raise ValueError("truth and prediction sizes differ")
    for name, arr in (("truth", truth), ("prediction", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} labels outside [0, {num_classes})")
    return np.bincount(truth * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.full(num.shape, np.nan)
    np.divide(num, den, out=out, where=den > 0)
    return out


def _counts(cm):
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    return tp, cm.sum(axis=0) - tp, cm.sum(axis=1) - tp


def precision_per_class(cm) -> np.ndarray:
    tp, fp, _ = _counts(cm)
    return _ratio(tp, tp + fp)


def recall_per_class(cm) -> np.ndarray:
    tp, _, fn = _counts(cm)
    return _ratio(tp, tp + fn)


def f1_from_precision_recall(precision, recall) -> np.ndarray:
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        f1 = _ratio(2 * p * r, p + r)
    return f1 if np.ndim(p) else float(f1)


def f1_per_class(cm) -> np.ndarray:
    """Harmonic mean of precision and recall; NaN when either is undefined or both are 0."""
    return f1_from_precision_recall(precision_per_class(cm), recall_per_class(cm))


def mean_f1(cm) -> float:
    """Plain mean, so one NaN class makes the mean NaN."""
    return float(np.mean(f1_per_class(cm)))


def iou_per_class(cm) -> np.ndarray:
    tp, fp, fn = _counts(cm)
    return _ratio(tp, tp + fp + fn)


def miou(cm) -> float:
    """Mean IoU over classes with a non-empty union."""
    iou = iou_per_class(cm)
    valid = ~np.isnan(iou)
    if not valid.any():
        raise ValueError("every class has an empty union")
    return float(iou[valid].mean())


def average_accuracy(cm) -> float:
    """Mean per-class recall over classes that occur in the ground truth."""
    rec = recall_per_class(cm)
    valid = ~np.isnan(rec)
    if not valid.any():
        raise ValueError("no class occurs in the ground truth")
    return float(rec[valid].mean())


def precision_recall_binary(cm) -> tuple[float, float]:
    """Precision and recall of the positive class (index 1) of a 2x2 matrix."""
    cm = np.asarray(cm)
    if cm.shape != (2, 2):
        raise ValueError("binary precision/recall needs a 2x2 confusion matrix")
    return float(precision_per_class(cm)[1]), float(recall_per_class(cm)[1])


def dice_coefficient(truth: np.ndarray, pred: np.ndarray, cls: int) -> float:
    """2|A∩B| / (|A| + |B|) on hard label maps.

    Follows the F1 convention: NaN when the overlap is empty, since then
    precision + recall is 0 or one of them is undefined.
    """
    a = np.asarray(truth).reshape(-1) == cls
    b = np.asarray(pred).reshape(-1) == cls
    inter = np.count_nonzero(a & b)
    total = np.count_nonzero(a) + np.count_nonzero(b)
    if inter == 0:
        return float("nan")
    return 2.0 * inter / total


def class_proportions(masks: Sequence[np.ndarray] | np.ndarray, num_classes: int) -> np.ndarray:
    if isinstance(masks, np.ndarray):
        masks = [masks]
    masks = [np.asarray(m).reshape(-1) for m in masks]
    total = sum(m.size for m in masks)
    if total == 0:
        raise ValueError("no mask pixels")
    counts = np.zeros(num_classes, dtype=np.int64)
    for m in masks:
        if m.size and (m.min() < 0 or m.max() >= num_classes):
            raise ValueError(f"mask labels outside [0, {num_classes})")
        counts += np.bincount(m.astype(np.int64), minlength=num_classes)
    return counts / total


@dataclass
class MetricsReport:
    class_names: list[str]
    confusion: np.ndarray
    f1: np.ndarray = field(init=False)
    iou: np.ndarray = field(init=False)
    precision: np.ndarray = field(init=False)
    recall: np.ndarray = field(init=False)
    mean_f1: float = field(init=False)
    miou: float = field(init=False)
    aa: float = field(init=False)

    def __post_init__(self):
        cm = np.asarray(self.confusion)
        if cm.shape != (len(self.class_names),) * 2:
            raise ValueError("class-count mismatch between names and confusion matrix")
        self.f1 = f1_per_class(cm)
        self.iou = iou_per_class(cm)
        self.precision = precision_per_class(cm)
        self.recall = recall_per_class(cm)
        self.mean_f1 = mean_f1(cm)
        self.miou = miou(cm)
        self.aa = average_accuracy(cm)

    @classmethod
    def from_predictions(cls, truth, pred, class_names):
        return cls(list(class_names), confusion_matrix(truth, pred, len(class_names)))

    def to_csv(self) -> str:
        """One row per class then a summary row; columns follow the F1/MeanF1/mIoU/AA layout."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "f1", "iou", "precision", "recall", "mean_f1", "miou", "aa"])
        for i, name in enumerate(self.class_names):
            writer.writerow([name, _fmt(self.f1[i]), _fmt(self.iou[i]), _fmt(self.precision[i]),
                             _fmt(self.recall[i]), "", "", ""])
        writer.writerow(["summary", "", "", "", "", _fmt(self.mean_f1), _fmt(self.miou), _fmt(self.aa)])
        return buf.getvalue()

    def table_row(self) -> list[str]:
        """Per-class F1, MeanF1, mIoU, AA in reporting order."""
        return [_fmt(v, 2) for v in self.f1] + [_fmt(self.mean_f1, 2), _fmt(self.miou, 2), _fmt(self.aa, 2)]


def _fmt(v: float, digits: int = 6) -> str:
    v = float(v)
    return "NaN" if math.isnan(v) else f"{v:.{digits}f}"


def report_from_csv(text: str) -> dict[str, dict[str, float]]:
    """Parse :meth:`MetricsReport.to_csv` output back to floats (NaN preserved)."""
    rows = list(csv.DictReader(io.StringIO(text)))
    out = {}
    for row in rows:
        name = row.pop("class")
        out[name] = {k: float(v) for k, v in row.items() if v != ""}
    return out
