"""Adversarial domain generalisation: dense heads, gradient reversal and the loss.

The domain classifier sits behind a gradient reversal layer, so a single
descent step on ``CE_y + CE_d + mu * graph_loss`` trains the domain head to
recognise subjects while pushing the shared extractor the other way.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, LabelError, ParameterError
from .tensor import Tensor, grl

__all__ = ["grl", "GrlConfig", "label_predictor", "domain_classifier", "LossParts",
           "total_loss", "one_hot", "linear_probe_accuracy"]


@dataclass(frozen=True)
class GrlConfig:
    """Reversal scale ``beta`` with a linear warm-up over ``warmup`` epochs."""

    beta: float = 0.1
    warmup: int = 10

    def __post_init__(self):
        if self.beta < 0:
            raise ParameterError(f"beta must be >= 0, got {self.beta}")
        if self.warmup < 0:
            raise ParameterError(f"warmup must be >= 0, got {self.warmup}")

    def schedule(self, epoch: int) -> float:
        """Multiplier in [0, 1] for 0-based training epoch ``epoch``."""
        if self.warmup == 0:
            return 1.0
        return min(1.0, epoch / self.warmup)

    def scale(self, epoch: int) -> float:
        return self.beta * self.schedule(epoch)


def _dense_softmax(features, w, b) -> Tensor:
    features, w, b = T.as_tensor(features), T.as_tensor(w), T.as_tensor(b)
    if features.ndim != 2 or w.ndim != 2 or features.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"dense head: features {features.shape}, weights {w.shape}, bias {b.shape}")
    return T.softmax_rows(features @ w + b)


def label_predictor(features, w_y, b_y) -> Tensor:
    """Stage probabilities softmax(features w_y + b_y), one row per sample."""
    return _dense_softmax(features, w_y, b_y)


def domain_classifier(features, w_d, b_d, grl_scale: float) -> Tensor:
    """Subject probabilities computed on gradient-reversed features."""
    return _dense_softmax(grl(features, grl_scale), w_d, b_d)


def one_hot(labels, width: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or np.any(labels < 0) or np.any(labels >= width) or labels.dtype.kind not in "iu":
        raise LabelError(f"labels must be integers in [0, {width})")
    return np.eye(width)[labels]


@dataclass
class LossParts:
    total: Tensor
    ce_y: float
    ce_d: float
    graph: float


def total_loss(class_probs, y, domain_probs, d, graph_loss=0.0, mu: float = 1e-4) -> LossParts:
    """CE_y + CE_d + mu * graph_loss.

    ``y`` and ``d`` are one-hot matrices or integer label vectors. The
    adversarial sign lives in the gradient reversal layer in front of the
    domain head, so the domain term enters the scalar with a plus sign and the
    reported domain loss is the plain cross-entropy.
    """
    class_probs, domain_probs = T.as_tensor(class_probs), T.as_tensor(domain_probs)
    if mu < 0:
        raise ParameterError(f"mu must be >= 0, got {mu}")
    y = np.asarray(y)
    d = np.asarray(d)
    y = one_hot(y, class_probs.shape[1]) if y.ndim == 1 else y
    d = one_hot(d, domain_probs.shape[1]) if d.ndim == 1 else d
    ce_y = T.cross_entropy(class_probs, y)
    ce_d = T.cross_entropy(domain_probs, d)
    graph_loss = T.as_tensor(graph_loss)
    total = ce_y + ce_d + mu * graph_loss
    return LossParts(total, ce_y.item(), ce_d.item(), graph_loss.item())


def linear_probe_accuracy(train_x, train_y, test_x=None, test_y=None, ridge: float = 1e-6) -> float:
    """Accuracy of a least-squares one-vs-all linear classifier.

    Features are standardised with the training statistics and a bias column
    is appended. With no test arrays the training accuracy is returned.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    if test_x is None:
        test_x, test_y = train_x, train_y
    test_x = np.asarray(test_x, dtype=np.float64)
    classes = np.unique(train_y)
    mean = train_x.mean(axis=0)
    std = train_x.std(axis=0)
    std[std == 0] = 1.0

    def design(x):
        z = (x - mean) / std
        return np.hstack([z, np.ones((len(z), 1))])

    A = design(train_x)
    targets = (train_y[:, None] == classes[None, :]).astype(np.float64)
    coef = np.linalg.solve(A.T @ A + ridge * np.eye(A.shape[1]), A.T @ targets)
    pred = classes[np.argmax(design(test_x) @ coef, axis=1)]
    return float(np.mean(pred == np.asarray(test_y)))
