"""Two-branch 1-D CNN turning each channel's epoch signal into a node feature vector.

The small-kernel branch looks at fine temporal detail, the large-kernel branch
at frequency content. Every channel goes through the same weights, and the two
flattened branch outputs are concatenated (small branch first).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import BatchNormState, Tensor


@dataclass(frozen=True)
class BranchSpec:
    filters: int
    kernel: int
    stride: int
    pool: int
    dropout: float
    inner_filters: int
    inner_kernel: int
    inner_pool: int
    n_inner: int = 3


@dataclass(frozen=True)
class FeatureNetConfig:
    input_length: int = 3000
    small: BranchSpec = BranchSpec(32, 50, 6, 16, 0.5, 64, 8, 8)
    large: BranchSpec = BranchSpec(64, 400, 50, 8, 0.0, 64, 6, 4)

    @classmethod
    def toy(cls) -> "FeatureNetConfig":
        """Shortened variant (length 300, kernels / 10) producing 8 features."""
        return cls(300, BranchSpec(4, 5, 6, 10, 0.5, 4, 3, 5), BranchSpec(4, 40, 5, 8, 0.0, 4, 3, 4))

    def branch_shapes(self, branch: str) -> list[tuple[int, int]]:
        """(length, channels) after the first conv, first pool, inner convs, last pool."""
        b = getattr(self, branch)
        length = (self.input_length - b.kernel) // b.stride + 1
        shapes = [(length, b.filters)]
        length = (length - b.pool) // b.pool + 1
        shapes.append((length, b.filters))
        shapes.append((length, b.inner_filters))
        length = (length - b.inner_pool) // b.inner_pool + 1
        shapes.append((length, b.inner_filters))
        return shapes

    @property
    def out_dim(self) -> int:
        return sum(int(np.prod(self.branch_shapes(b)[-1])) for b in ("small", "large"))


def _conv_init(rng, c_out, c_in, k):
    return rng.normal(0.0, np.sqrt(2.0 / (c_in * k)), size=(c_out, c_in, k))


@dataclass
class FeatureNet:
    config: FeatureNetConfig
    prefix: str = "feat"
    params: dict = field(default_factory=dict)
    bn: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: FeatureNetConfig, rng: np.random.Generator, prefix: str = "feat"):
        net = cls(config, prefix)
        for branch in ("small", "large"):
            b = getattr(config, branch)
            layers = [(b.filters, 1, b.kernel)]
            layers += [(b.inner_filters, b.filters if i == 0 else b.inner_filters, b.inner_kernel)
                       for i in range(b.n_inner)]
            for i, (c_out, c_in, k) in enumerate(layers):
                name = f"{prefix}.{branch}.conv{i}"
                net.params[f"{name}.w"] = Tensor(_conv_init(rng, c_out, c_in, k), requires_grad=True)
                net.params[f"{name}.b"] = Tensor(np.zeros(c_out), requires_grad=True)
                net.params[f"{name}.gamma"] = Tensor(np.ones(c_out), requires_grad=True)
                net.params[f"{name}.beta"] = Tensor(np.zeros(c_out), requires_grad=True)
                net.bn[name] = BatchNormState(c_out)
        return net

    def _block(self, x, name, stride, padding, training):
        p = self.params
        x = T.conv1d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=padding)
        x = T.batch_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"], self.bn[name], training)
        return T.relu(x)

    def _branch(self, x, branch, training, rng, trace):
        b = getattr(self.config, branch)
        pre = f"{self.prefix}.{branch}"
        x = self._block(x, f"{pre}.conv0", b.stride, "valid", training)
        trace.append((f"{branch}.conv0", x.shape[1:]))
        x = T.maxpool1d(x, b.pool, b.pool)
        trace.append((f"{branch}.pool0", x.shape[1:]))
        if b.dropout > 0:
            x = T.dropout(x, b.dropout, training, rng)
        for i in range(1, b.n_inner + 1):
            x = self._block(x, f"{pre}.conv{i}", 1, "same", training)
        trace.append((f"{branch}.inner", x.shape[1:]))
        x = T.maxpool1d(x, b.inner_pool, b.inner_pool)
        trace.append((f"{branch}.pool1", x.shape[1:]))
        x = T.reshape(x, (x.shape[0], -1))
        trace.append((f"{branch}.flat", x.shape[1:]))
        return x

    def forward(self, signals, training: bool = False, rng: np.random.Generator | None = None,
                trace: list | None = None) -> Tensor:
        """Map (M, L) single-channel signals to (M, out_dim) features."""
        signals = T.as_tensor(signals)
        if signals.ndim != 2 or signals.shape[1] != self.config.input_length:
            raise DimensionError(f"feature net expects signals of length {self.config.input_length}, "
                                 f"got shape {signals.shape}")
        trace = trace if trace is not None else []
        x = T.reshape(signals, signals.shape + (1,))
        small = self._branch(x, "small", training, rng, trace)
        large = self._branch(x, "large", training, rng, trace)
        out = T.concat([small, large], axis=1)
        trace.append(("concat", out.shape[1:]))
        return out

    __call__ = forward


def extract_features(epoch, net: FeatureNet, mode: str = "eval", rng=None, trace=None) -> Tensor:
    """Per-channel features of one epoch: (N, L) signals to an (N, F_d) matrix."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return net.forward(epoch, training=mode == "train", rng=rng, trace=trace)
