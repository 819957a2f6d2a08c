"""Confusion-matrix metrics: accuracy, per-class F1, macro-F1 and Cohen's kappa."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, MetricWarning, ParameterError

N_CLASSES = 5


@dataclass
class Metrics:
    confusion: np.ndarray
    accuracy: float
    per_class_f1: np.ndarray
    macro_f1: float
    kappa: float

    @property
    def n(self) -> int:
        return int(self.confusion.sum())

    def as_row(self) -> dict:
        row = {"n": self.n, "accuracy": self.accuracy, "macro_f1": self.macro_f1, "kappa": self.kappa}
        for i, f1 in enumerate(self.per_class_f1):
            row[f"f1_{i}"] = float(f1)
        return row


def confusion_matrix(y_true, y_pred, n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with rows indexed by the true class and columns by the prediction."""
    y_true = np.asarray(y_true, dtype=np.intp)
    y_pred = np.asarray(y_pred, dtype=np.intp)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise DimensionError(f"label vectors differ: {y_true.shape} vs {y_pred.shape}")
    if len(y_true) and (min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) >= n_classes):
        raise ParameterError(f"labels must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def predict(probs) -> np.ndarray:
    """Argmax per row; ties go to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=1)


def metrics_from_confusion(cm, warn: bool = True) -> Metrics:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise DimensionError(f"confusion matrix must be square, got {cm.shape}")
    if np.any(cm < 0):
        raise ParameterError("confusion matrix entries must be non-negative")
    total = cm.sum()
    if total == 0:
        raise ParameterError("metrics of an empty confusion matrix are undefined")
    tp = np.diag(cm).astype(np.float64)
    true_count = cm.sum(axis=1).astype(np.float64)
    pred_count = cm.sum(axis=0).astype(np.float64)
    denom = true_count + pred_count
    absent = denom == 0
    if warn and absent.any():
        warnings.warn(f"classes {np.flatnonzero(absent).tolist()} never occur; their F1 is set to 0",
                      MetricWarning)
    f1 = np.divide(2.0 * tp, denom, out=np.zeros_like(tp), where=~absent)
    p_o = tp.sum() / total
    p_e = float((true_count * pred_count).sum()) / float(total) ** 2
    if p_e == 1.0:
        if warn:
            warnings.warn("chance agreement is 1; kappa set to 0", MetricWarning)
        kappa = 0.0
    else:
        kappa = (p_o - p_e) / (1.0 - p_e)
    return Metrics(cm, float(p_o), f1, float(f1.mean()), float(kappa))


def compute_metrics(y_true, y_pred, n_classes: int = N_CLASSES, warn: bool = True) -> Metrics:
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, n_classes), warn=warn)
