"""Attention-modulated spatial-temporal graph convolution and the two-view model.

Window activations use the layout (B, N, C, T): batch, node, channel, time.
Each view branch runs temporal attention, spatial attention, Chebyshev graph
convolution and a temporal convolution per layer. The functional-connectivity
view rebuilds its graph from the node features of every epoch. The distance view
uses a fixed electrode graph.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import graph as G
from . import tensor as T
from .errors import ContextError, DimensionError, ParameterError
from .features import FeatureNet, FeatureNetConfig
from .tensor import Tensor

N_CLASSES = 5


# -- attention ----------------------------------------------------------------

def _check_window(x: Tensor) -> tuple[int, int, int, int]:
    if x.ndim != 4:
        raise DimensionError(f"window activations must be (B, N, C, T), got {x.shape}")
    return x.shape


def spatial_attention(x, params: dict) -> Tensor:
    """Row-stochastic node-to-node attention P' of shape (B, N, N).

    P = V_p sigmoid((X Z1) Z2 (Z3 X)^T + b_p), then a softmax over each row.
    ``params`` holds Z1 (T,), Z2 (C, T), Z3 (C,), V_p and b_p (N, N).
    """
    x = T.as_tensor(x)
    B, N, C, Tn = _check_window(x)
    Z1, Z2, Z3, Vp, bp = (params[k] for k in ("Z1", "Z2", "Z3", "V_p", "b_p"))
    if Z1.shape != (Tn,) or Z2.shape != (C, Tn) or Z3.shape != (C,) or Vp.shape != (N, N):
        raise DimensionError(f"spatial attention parameters do not fit activations {x.shape}")
    lhs = T.einsum("bnct,t->bnc", x, Z1)
    lhs = T.einsum("bnc,cu->bnu", lhs, Z2)
    rhs = T.einsum("bnct,c->bnt", x, Z3)
    score = T.einsum("bnu,bmu->bnm", lhs, rhs)
    P = T.einsum("nk,bkm->bnm", Vp, T.sigmoid(score + bp))
    return T.softmax_rows(P)


def temporal_attention(x, params: dict) -> Tensor:
    """Row-stochastic time-to-time attention Q' of shape (B, T, T).

    Q = V_q sigmoid(((X^T M1) M2)(M3 X) + b_q), then a softmax over each row.
    ``params`` holds M1 (N,), M2 (C, N), M3 (C,), V_q and b_q (T, T).
    """
    x = T.as_tensor(x)
    B, N, C, Tn = _check_window(x)
    M1, M2, M3, Vq, bq = (params[k] for k in ("M1", "M2", "M3", "V_q", "b_q"))
    if M1.shape != (N,) or M2.shape != (C, N) or M3.shape != (C,) or Vq.shape != (Tn, Tn):
        raise DimensionError(f"temporal attention parameters do not fit activations {x.shape}")
    lhs = T.einsum("bnct,n->btc", x, M1)
    lhs = T.einsum("btc,cm->btm", lhs, M2)
    rhs = T.einsum("bnct,c->bnt", x, M3)
    score = T.einsum("btm,bmu->btu", lhs, rhs)
    Q = T.einsum("tk,bku->btu", Vq, T.sigmoid(score + bq))
    return T.softmax_rows(Q)


def mix_time(x, Q) -> Tensor:
    """X_hat[..., t] = sum_u X[..., u] Q[u, t] for Q of shape (B, T, T)."""
    return T.einsum("bncu,but->bnct", x, Q)


def temporal_attention_apply(x, params: dict) -> tuple[Tensor, Tensor]:
    """Temporally re-weighted activations and the attention matrix used."""
    Q = temporal_attention(x, params)
    return mix_time(x, Q), Q


# -- convolutions ---------------------------------------------------------------

def cheb_graph_conv(x_hat, stack, theta, P) -> Tensor:
    """Chebyshev graph convolution with the polynomials modulated by attention.

    out[:, :, t] = sum_k (T_k * P') x_hat[:, :, t] Theta_k, with the product
    ``*`` taken elementwise. ``stack`` is a :class:`ChebStack` (or list) whose
    polynomials are (N, N) for a graph shared by every sample, or (B, T, N, N)
    for one graph per sample and time step. ``theta`` is (K, C_in, C_out) and
    ``P`` is (B, N, N) or None for no modulation.
    """
    x_hat = T.as_tensor(x_hat)
    B, N, C, Tn = _check_window(x_hat)
    polys = stack.polys if isinstance(stack, G.ChebStack) else list(stack)
    theta = T.as_tensor(theta)
    if theta.ndim != 3 or theta.shape[0] != len(polys):
        raise ParameterError(f"Theta has {theta.shape[0] if theta.ndim else 0} orders, "
                             f"Chebyshev stack has {len(polys)}")
    if theta.shape[1] != C:
        raise DimensionError(f"Theta expects {theta.shape[1]} input channels, got {C}")
    polys = T.stack([T.as_tensor(p) for p in polys], axis=0)
    per_step = polys.ndim == 5
    if per_step and polys.shape[1:] != (B, Tn, N, N):
        raise DimensionError(f"per-step polynomials {polys.shape[1:]} do not match {(B, Tn, N, N)}")
    if not per_step and polys.shape[1:] != (N, N):
        raise DimensionError(f"polynomials {polys.shape[1:]} do not match {N} nodes")
    if P is None:
        P = Tensor(np.ones((B, N, N)))
    P = T.as_tensor(P)
    if per_step:
        mod = polys * T.reshape(P, (1, B, 1, N, N))
        mixed = T.einsum("kbtnm,bmct->bkntc", mod, x_hat)
    else:
        mod = T.reshape(polys, (polys.shape[0], 1, N, N)) * T.reshape(P, (1, B, N, N))
        mixed = T.einsum("kbnm,bmct->bkntc", mod, x_hat)
    return T.einsum("bkntc,kco->bnot", mixed, theta)


def temporal_conv(x, phi, kernel: int | None = None) -> Tensor:
    """ReLU(Phi * ReLU(x)): a 1 x kappa convolution over time, same padding.

    ``phi`` is (C_out, C_in, kappa). The odd sample of padding goes on the
    right, so the output keeps the input's time length.
    """
    x = T.as_tensor(x)
    B, N, C, Tn = _check_window(x)
    phi = T.as_tensor(phi)
    kappa = phi.shape[2]
    if kernel is not None and kernel != kappa:
        raise ParameterError(f"kernel {kernel} does not match Phi of width {kappa}")
    if kappa > Tn:
        raise ParameterError(f"temporal kernel {kappa} is longer than the window ({Tn} steps)")
    if phi.shape[1] != C:
        raise DimensionError(f"Phi expects {phi.shape[1]} input channels, got {C}")
    left = (kappa - 1) // 2
    padded = T.pad(T.relu(x), [(0, 0), (0, 0), (0, 0), (left, kappa - 1 - left)])
    out = None
    for j in range(kappa):
        term = T.einsum("bnct,oc->bnot", padded[:, :, :, j:j + Tn], phi[:, :, j])
        out = term if out is None else out + term
    return T.relu(out)


def fuse_views(fc, dc) -> Tensor:
    """Concatenate two views along the channel axis, functional view first."""
    fc, dc = T.as_tensor(fc), T.as_tensor(dc)
    if fc.ndim != 4 or dc.ndim != 4 or fc.shape[:2] != dc.shape[:2] or fc.shape[3] != dc.shape[3]:
        raise DimensionError(f"cannot fuse views of shapes {fc.shape} and {dc.shape}")
    return T.concat([fc, dc], axis=2)


# -- model ----------------------------------------------------------------------

FIXED_MODES = ("full", "knn", "pcc", "plv", "mi")


@dataclass(frozen=True)
class ModelConfig:
    n_channels: int
    n_domains: int
    d: int = 2
    K: int = 3
    layers: int = 1
    cheb_filters: int = 10
    time_filters: int = 10
    time_kernel: int = 3
    head_hidden: int = 0
    adjacency: str = "learned"
    feature: FeatureNetConfig = field(default_factory=FeatureNetConfig)

    @property
    def window(self) -> int:
        return 2 * self.d + 1

    @property
    def effective_kernel(self) -> int:
        """Temporal kernel width actually used: never wider than the window."""
        return min(self.time_kernel, self.window)

    @property
    def readout_dim(self) -> int:
        return 2 * self.time_filters

    def validate(self):
        if self.n_channels < 1 or self.n_domains < 1:
            raise ParameterError("n_channels and n_domains must be positive")
        if self.d < 0 or self.K < 1 or self.layers < 1:
            raise ParameterError("need d >= 0, K >= 1 and layers >= 1")
        if min(self.cheb_filters, self.time_filters, self.time_kernel) < 1:
            raise ParameterError("filter counts and the temporal kernel must be positive")
        if self.adjacency not in ("learned",) + FIXED_MODES:
            raise ParameterError(f"unknown adjacency mode {self.adjacency!r}")
        if self.head_hidden < 0:
            raise ParameterError("head_hidden must be >= 0")


@dataclass
class ForwardOutput:
    class_probs: Tensor
    domain_probs: Tensor
    readout: Tensor
    graph_loss: Tensor
    aux: dict


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _uniform_small(rng, shape, fan):
    return rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(fan)


class MSTGCN:
    """Two-view spatial-temporal graph network with label and domain heads.

    ``dc_adjacency`` is the (N, N) electrode-distance graph. In a fixed
    adjacency mode the functional view uses ``fixed_adjacency`` instead of the
    learned per-epoch graph.
    """

    def __init__(self, config: ModelConfig, dc_adjacency, rng: np.random.Generator,
                 fixed_adjacency=None):
        config.validate()
        self.config = config
        N = config.n_channels
        dc = dc_adjacency.weights if isinstance(dc_adjacency, G.AdjacencyMatrix) else np.asarray(dc_adjacency, float)
        if dc.shape != (N, N):
            raise DimensionError(f"distance adjacency {dc.shape} does not match {N} channels")
        self.dc_adjacency = dc
        self.dc_stack = [p.data for p in G.cheb_stack(G.scaled_laplacian(dc), config.K).polys]
        self.fixed_adjacency = None
        self.fixed_stack = None
        if config.adjacency != "learned":
            if fixed_adjacency is None:
                raise ParameterError(f"adjacency mode {config.adjacency!r} needs a fixed adjacency matrix")
            self.set_fixed_adjacency(fixed_adjacency)

        self.feature_net = FeatureNet.init(config.feature, rng)
        self.params: dict[str, Tensor] = dict(self.feature_net.params)
        F = config.feature.out_dim
        p = self.params

        def add(name, value):
            p[name] = Tensor(value, requires_grad=True)

        add("graph.w", rng.uniform(0.0, 0.01, size=F))
        Tn = config.window
        for view in ("fc", "dc"):
            c_in = F
            for layer in range(config.layers):
                pre = f"{view}.l{layer}"
                add(f"{pre}.Z1", _uniform_small(rng, Tn, Tn))
                add(f"{pre}.Z2", _uniform_small(rng, (c_in, Tn), c_in))
                add(f"{pre}.Z3", _uniform_small(rng, c_in, c_in))
                add(f"{pre}.V_p", _uniform_small(rng, (N, N), N))
                add(f"{pre}.b_p", np.zeros((N, N)))
                add(f"{pre}.M1", _uniform_small(rng, N, N))
                add(f"{pre}.M2", _uniform_small(rng, (c_in, N), c_in))
                add(f"{pre}.M3", _uniform_small(rng, c_in, c_in))
                add(f"{pre}.V_q", _uniform_small(rng, (Tn, Tn), Tn))
                add(f"{pre}.b_q", np.zeros((Tn, Tn)))
                # the row-softmax attention P' has entries near 1/N at init, so the
                # Hadamard product T_k * P' shrinks each filter by about N; the gain
                # restores unit scale through the graph convolution
                add(f"{pre}.theta", N * _glorot(rng, (config.K, c_in, config.cheb_filters),
                                                c_in * config.K, config.cheb_filters))
                k = config.effective_kernel
                add(f"{pre}.phi", _glorot(rng, (config.time_filters, config.cheb_filters, k),
                                          config.cheb_filters * k, config.time_filters))
                c_in = config.time_filters
        R = config.readout_dim
        for head, width in (("y", N_CLASSES), ("d", config.n_domains)):
            fan = R
            if config.head_hidden:
                add(f"head.{head}.hidden.w", _glorot(rng, (R, config.head_hidden), R, config.head_hidden))
                add(f"head.{head}.hidden.b", np.zeros(config.head_hidden))
                fan = config.head_hidden
            add(f"head.{head}.w", _glorot(rng, (fan, width), fan, width))
            add(f"head.{head}.b", np.zeros(width))

    # -- parameter groups -------------------------------------------------

    def group(self, name: str) -> list[str]:
        """Parameter names of a group: features, graph, fc, dc, label, domain."""
        prefixes = {"features": "feat.", "graph": "graph.", "fc": "fc.", "dc": "dc.",
                    "label": "head.y.", "domain": "head.d."}
        if name not in prefixes:
            raise ParameterError(f"unknown parameter group {name!r}")
        return [k for k in self.params if k.startswith(prefixes[name])]

    def extractor_names(self) -> list[str]:
        """Everything upstream of the heads (the adversary's opponent)."""
        return [k for k in self.params if not k.startswith("head.")]

    def set_fixed_adjacency(self, weights):
        weights = weights.weights if isinstance(weights, G.AdjacencyMatrix) else np.asarray(weights, float)
        N = self.config.n_channels
        if weights.shape != (N, N):
            raise DimensionError(f"fixed adjacency {weights.shape} does not match {N} channels")
        self.fixed_adjacency = weights
        self.fixed_stack = [q.data for q in G.cheb_stack(G.scaled_laplacian(weights), self.config.K).polys]

    def bn_state(self) -> dict:
        return {k: (v.running_mean.copy(), v.running_var.copy()) for k, v in self.feature_net.bn.items()}

    def load_bn_state(self, state: dict):
        for k, (mean, var) in state.items():
            self.feature_net.bn[k].running_mean = np.array(mean, dtype=np.float64)
            self.feature_net.bn[k].running_var = np.array(var, dtype=np.float64)

    # -- forward ------------------------------------------------------------

    def _layer_params(self, view: str, layer: int) -> dict:
        pre = f"{view}.l{layer}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def _branch(self, x, view, stack, aux):
        for layer in range(self.config.layers):
            lp = self._layer_params(view, layer)
            x_hat, Q = temporal_attention_apply(x, lp)
            P = spatial_attention(x_hat, lp)
            aux[f"{view}.l{layer}.temporal"] = Q
            aux[f"{view}.l{layer}.spatial"] = P
            x = cheb_graph_conv(x_hat, stack, lp["theta"], P)
            x = temporal_conv(x, lp["phi"])
        return x

    def _head(self, h, head):
        p = self.params
        if f"head.{head}.hidden.w" in p:
            h = T.relu(h @ p[f"head.{head}.hidden.w"] + p[f"head.{head}.hidden.b"])
        return T.softmax_rows(h @ p[f"head.{head}.w"] + p[f"head.{head}.b"])

    def forward_indexed(self, epochs, index, training: bool = False, rng=None,
                        grl_scale: float = 0.0, lam: float = 0.001) -> ForwardOutput:
        """Forward pass over windows given as indices into a set of epochs.

        ``epochs`` is (E, N, L) raw signals and ``index`` is (B, 2d+1) integer
        positions into it, so an epoch shared by overlapping windows is
        encoded once.
        """
        cfg = self.config
        epochs = np.asarray(epochs, dtype=np.float64)
        index = np.asarray(index, dtype=np.intp)
        if index.ndim != 2 or index.shape[1] != cfg.window:
            raise ContextError(f"windows must hold 2d+1 = {cfg.window} epochs, got index shape {index.shape}")
        if epochs.ndim != 3 or epochs.shape[1] != cfg.n_channels:
            raise DimensionError(f"epochs must be (E, {cfg.n_channels}, L), got {epochs.shape}")
        E, N, L = epochs.shape
        B, Tn = index.shape
        feats = self.feature_net.forward(epochs.reshape(E * N, L), training=training, rng=rng)
        feats = T.reshape(feats, (E, N, -1))
        aux = {}
        if cfg.adjacency == "learned":
            A = G.learn_fc_adjacency(feats, self.params["graph.w"])
            graph_loss = G.graph_learning_loss(feats, A, lam)
            fc_polys = G.cheb_stack(G.scaled_laplacian(A), cfg.K).polys
            fc_stack = [T.take(q, index, axis=0) for q in fc_polys]
            aux["A_fc"] = T.take(A, index, axis=0)
        else:
            graph_loss = Tensor(0.0)
            fc_stack = self.fixed_stack
        windows = T.take(feats, index, axis=0)                  # (B, T, N, F)
        x = T.transpose(windows, (0, 2, 3, 1))                  # (B, N, F, T)
        fc = self._branch(x, "fc", fc_stack, aux)
        dc = self._branch(x, "dc", self.dc_stack, aux)
        fused = fuse_views(fc, dc)
        readout = T.mean(fused, axis=(1, 3))
        class_probs = self._head(readout, "y")
        domain_probs = self._head(T.grl(readout, grl_scale), "d")
        return ForwardOutput(class_probs, domain_probs, readout, graph_loss, aux)

    def forward(self, windows, training: bool = False, rng=None, grl_scale: float = 0.0,
                lam: float = 0.001) -> ForwardOutput:
        """Forward pass over raw windows of shape (B, 2d+1, N, L)."""
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 4:
            raise DimensionError(f"windows must be (B, 2d+1, N, L), got {windows.shape}")
        B, Tn = windows.shape[:2]
        if Tn != self.config.window:
            raise ContextError(f"windows must hold 2d+1 = {self.config.window} epochs, got {Tn}")
        index = np.arange(B * Tn).reshape(B, Tn)
        return self.forward_indexed(windows.reshape((B * Tn,) + windows.shape[2:]), index,
                                    training, rng, grl_scale, lam)

    __call__ = forward


def mstgcn_forward(window, model: MSTGCN, mode: str = "eval", rng=None, grl_scale: float = 0.0):
    """Run one window (2d+1, N, L) or a batch (B, 2d+1, N, L) through ``model``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    window = np.asarray(window, dtype=np.float64)
    if window.ndim == 3:
        window = window[None]
    return model.forward(window, training=mode == "train", rng=rng, grl_scale=grl_scale)
