"""Confusion-matrix accumulation and macro-averaged segmentation metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import NoDataError, ShapeError

METRIC_NAMES = ("mIoU", "mPre", "mRec", "mF1")


@dataclass
class ConfusionMatrix:
    """``counts[g, p]`` = number of pixels with ground truth g predicted as p."""

    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ShapeError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


def hard_prediction(prediction) -> np.ndarray:
    """Per-pixel argmax over the class axis (axis 1 of ``(B, C, H, W)`` or 0 of ``(C, H, W)``).

    ``argmax`` returns the first maximum, so ties go to the lowest class index.
    """
    if isinstance(prediction, torch.Tensor):
        prediction = prediction.detach().cpu().numpy()
    axis = 1 if prediction.ndim == 4 else 0
    return np.argmax(prediction, axis=axis)


def accumulate(cm: ConfusionMatrix, prediction, labels, scores: bool = True) -> ConfusionMatrix:
    """Add the pixels of ``prediction`` against ``labels`` to ``cm``.

    With ``scores=True`` the prediction is a class-score tensor reduced by argmax;
    otherwise it is already a class-index map shaped like ``labels``.
    """
    pred = hard_prediction(prediction) if scores else np.asarray(prediction)
    if isinstance(labels, torch.Tensor):
        labels = labels.detach().cpu().numpy()
    labels = np.asarray(labels)
    if pred.shape != labels.shape:
        raise ShapeError(f"prediction {pred.shape} and labels {labels.shape} misaligned")
    c = cm.num_classes
    idx = labels.astype(np.int64).ravel() * c + pred.astype(np.int64).ravel()
    added = np.bincount(idx, minlength=c * c).reshape(c, c)
    return ConfusionMatrix(cm.counts + added)


def per_class_scores(cm: ConfusionMatrix) -> dict[str, np.ndarray]:
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp

    def ratio(num, den):
        return np.divide(num, den, out=np.zeros_like(num), where=den > 0)

    pre = ratio(tp, tp + fp)
    rec = ratio(tp, tp + fn)
    return {
        "IoU": ratio(tp, tp + fp + fn),
        "Pre": pre,
        "Rec": rec,
        "F1": ratio(2 * pre * rec, pre + rec),
    }


def compute_metrics(cm: ConfusionMatrix) -> dict[str, float]:
    """Macro means over classes seen in ground truth or prediction.

    Zero-denominator per-class ratios count as 0.
    """
    if cm.total <= 0:
        raise NoDataError("confusion matrix is empty")
    present = (cm.counts.sum(axis=0) + cm.counts.sum(axis=1)) > 0
    scores = per_class_scores(cm)
    return {f"m{k}": float(v[present].mean()) for k, v in scores.items()}


def format_record(record: dict) -> str:
    """One ``key=value`` line; floats are written with full precision."""
    parts = []
    for key, value in record.items():
        if isinstance(value, float):
            value = repr(value)
        parts.append(f"{key}={value}")
    return " ".join(parts)


def parse_record(line: str) -> dict:
    out = {}
    for token in line.split():
        key, value = token.split("=", 1)
        try:
            out[key] = int(value)
        except ValueError:
            try:
                out[key] = float(value)
            except ValueError:
                out[key] = value
    return out
