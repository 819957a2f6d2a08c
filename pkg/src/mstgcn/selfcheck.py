"""Fast built-in verification suites: gradient checks and closed-form oracles.

Each suite returns the worst error it saw; a suite passes when that error is
under its tolerance. ``run_all`` is what the ``self-check`` command runs.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import graph as G
from . import tensor as T
from .domain import linear_probe_accuracy
from .errors import DegenerateGraphWarning
from .features import FeatureNetConfig
from .metrics import metrics_from_confusion
from .stgcn import MSTGCN, ModelConfig, cheb_graph_conv
from .tensor import Tensor


@dataclass
class SuiteResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tolerance)


def _elementwise_gradients(rng) -> float:
    worst = 0.0
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    for fn in (T.sigmoid, T.exp, T.square, lambda t: T.softmax_rows(t)):
        worst = max(worst, T.grad_check(lambda t, fn=fn: T.sum(fn(t) * w), x))
    b = rng.normal(size=(4, 2))
    c = rng.normal(size=(3, 2))
    worst = max(worst, T.grad_check(lambda t: T.sum(T.matmul(t, b) * c), x))
    onehot = np.eye(4)[[0, 3, 1]]
    worst = max(worst, T.grad_check(lambda t: T.cross_entropy(T.softmax_rows(t), onehot), x))
    return worst


def _conv_gradients(rng) -> float:
    x = Tensor(rng.normal(size=(2, 20, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)
    worst = 0.0
    for stride, padding in ((1, "same"), (3, "valid")):
        out_shape = T.conv1d(x, w, b, stride, padding).shape
        weights = rng.normal(size=out_shape)
        worst = max(worst, T.grad_check_params(
            lambda: T.sum(T.conv1d(x, w, b, stride, padding) * weights), [x, w, b]))
    pooled = rng.normal(size=(2, 4, 3))
    worst = max(worst, T.grad_check_params(lambda: T.sum(T.maxpool1d(x, 5, 5) * pooled), [x]))
    return worst


def _graph_gradients(rng) -> float:
    X = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    w = Tensor(rng.uniform(0.2, 1.0, size=3), requires_grad=True)
    weights = rng.normal(size=(4, 4))

    def loss():
        A = G.learn_fc_adjacency(X, w)
        return T.sum(G.scaled_laplacian(A) * weights) + G.graph_learning_loss(X, A)

    return T.grad_check_params(loss, [X, w])


def _spectral_oracle(rng) -> float:
    worst = 0.0
    for _ in range(10):
        A = rng.random((5, 5))
        A = (A + A.T) / 2
        np.fill_diagonal(A, 0)
        Ls = G.scaled_laplacian(A).data
        theta = rng.normal(size=(3, 1, 1))
        x = rng.normal(size=(1, 5, 1, 1))
        stack = G.cheb_stack(Ls, 3)
        out = cheb_graph_conv(x, stack, theta, np.ones((1, 5, 5))).data[0, :, 0, 0]
        lam, U = np.linalg.eigh(Ls)
        gain = sum(theta[k, 0, 0] * np.cos(k * np.arccos(np.clip(lam, -1, 1))) for k in range(3))
        worst = max(worst, np.abs(out - U @ (gain * (U.T @ x[0, :, 0, 0]))).max())
    return worst


def _feature_shapes(rng) -> float:
    cfg = FeatureNetConfig()
    expected = {"small": [(492, 32), (30, 32), (30, 64), (3, 64)],
                "large": [(53, 64), (6, 64), (6, 64), (1, 64)]}
    bad = sum(cfg.branch_shapes(b) != s for b, s in expected.items()) + (cfg.out_dim != 256)
    return float(bad)


def _model_gradients(rng) -> float:
    cfg = ModelConfig(n_channels=3, n_domains=2, d=1, K=2, layers=1, cheb_filters=3, time_filters=3,
                      time_kernel=3, feature=FeatureNetConfig.toy())
    layout = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    dc = np.exp(-((layout[:, None] - layout[None]) ** 2).sum(-1))
    np.fill_diagonal(dc, 0)
    model = MSTGCN(cfg, dc, rng)
    windows = rng.normal(size=(2, 3, 3, 300))
    y = np.eye(5)[[1, 3]]
    dom = np.eye(2)[[0, 1]]
    names = ["graph.w", "fc.l0.theta", "dc.l0.phi", "fc.l0.V_p", "dc.l0.M2", "head.y.w",
             "feat.small.conv0.w", "feat.large.conv3.w"]
    params = [model.params[n] for n in names]

    # the reversal layer makes the domain term's tape gradient differ from its
    # finite difference on purpose, so it is checked only on the domain head
    def label_loss():
        out = model.forward(windows, training=False)
        return T.cross_entropy(out.class_probs, y) + 0.01 * out.graph_loss

    def domain_loss():
        return T.cross_entropy(model.forward(windows, training=False, grl_scale=0.5).domain_probs, dom)

    return max(T.grad_check_params(label_loss, params, max_coords=6, rng=rng),
               T.grad_check_params(domain_loss, [model.params["head.d.w"], model.params["head.d.b"]]))


def _metric_oracle(rng) -> float:
    m = metrics_from_confusion(np.array([[40, 10], [20, 30]]))
    return max(abs(m.accuracy - 0.7), abs(m.kappa - 0.4), abs(m.per_class_f1[0] - 80 / 110),
               abs(m.per_class_f1[1] - 60 / 90))


def _probe(rng) -> float:
    centers = rng.normal(size=(3, 4)) * 5
    y = np.repeat(np.arange(3), 30)
    x = centers[y] + rng.normal(size=(90, 4))
    return 1.0 - linear_probe_accuracy(x, y)


SUITES = (
    ("tensor gradients", _elementwise_gradients, 1e-5),
    ("convolution and pooling gradients", _conv_gradients, 1e-5),
    ("graph construction gradients", _graph_gradients, 1e-5),
    ("Chebyshev spectral oracle", _spectral_oracle, 1e-6),
    ("feature-net shapes", _feature_shapes, 0.5),
    ("toy model gradients", _model_gradients, 1e-4),
    ("metric oracle", _metric_oracle, 1e-12),
    ("linear probe", _probe, 0.05),
)


def run_all(seed: int = 0) -> list[SuiteResult]:
    results = []
    for name, fn, tol in SUITES:
        rng = np.random.default_rng(seed)
        start = time.perf_counter()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateGraphWarning)
            try:
                error = float(fn(rng))
            except Exception:  # a crashing suite is a failing suite
                error = float("inf")
        results.append(SuiteResult(name, error, tol, time.perf_counter() - start))
    return results
