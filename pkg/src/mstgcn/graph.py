"""Brain-graph construction: learned functional connectivity, electrode-distance
graphs, fixed connectivity baselines, scaled Laplacians and Chebyshev stacks."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import hilbert

from . import tensor as T
from .errors import DegenerateGraphWarning, DegenerateLayoutWarning, DimensionError, ParameterError
from .tensor import Tensor

ADJACENCY_KINDS = ("learned-FC", "distance-DC", "full", "knn", "pcc", "plv", "mi")
BASELINE_KINDS = ("full", "knn", "pcc", "plv", "mi")


@dataclass
class AdjacencyMatrix:
    weights: np.ndarray
    kind: str

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.kind not in ADJACENCY_KINDS:
            raise ParameterError(f"unknown adjacency kind {self.kind!r}")
        if self.weights.ndim != 2 or self.weights.shape[0] != self.weights.shape[1]:
            raise DimensionError(f"adjacency must be square, got {self.weights.shape}")
        if np.any(self.weights < 0):
            raise ParameterError("adjacency weights must be non-negative")

    @property
    def n(self) -> int:
        return self.weights.shape[0]


@dataclass
class ElectrodeLayout:
    names: list[str]
    coords: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.shape != (len(self.names), 3):
            raise DimensionError(f"{len(self.names)} names but coords of shape {self.coords.shape}")
        if len(set(self.names)) != len(self.names):
            raise ParameterError("electrode names must be unique")
        if not np.isfinite(self.coords).all():
            raise ParameterError("electrode coordinates must be finite")

    @property
    def n(self) -> int:
        return len(self.names)

    def subset(self, names) -> "ElectrodeLayout":
        idx = [self.names.index(nm) for nm in names]
        return ElectrodeLayout([self.names[i] for i in idx], self.coords[idx])


@dataclass
class GraphLearnParams:
    w: Tensor

    @classmethod
    def init(cls, n_features: int, rng: np.random.Generator, scale: float = 0.01):
        return cls(Tensor(rng.uniform(0.0, scale, n_features), requires_grad=True, name="graph.w"))


@dataclass
class ChebStack:
    polys: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.polys)


# -- learned functional connectivity ------------------------------------------

def learn_fc_adjacency(X, params: GraphLearnParams | Tensor) -> Tensor:
    """Row-softmax of ReLU(w . |x_m - x_n|) over n.

    ``X`` is (..., N, F_d); any leading axes are treated as independent
    graphs. The result has shape (..., N, N) and stays on the tape.
    """
    X = T.as_tensor(X)
    w = params.w if isinstance(params, GraphLearnParams) else T.as_tensor(params)
    if w.shape != (X.shape[-1],):
        raise DimensionError(f"graph weight vector {w.shape} does not match feature dim {X.shape[-1]}")
    lead, n, f = X.shape[:-2], X.shape[-2], X.shape[-1]
    xm = T.reshape(X, lead + (n, 1, f))
    xn = T.reshape(X, lead + (1, n, f))
    diff = T.abs(xm - xn)
    logits = T.relu(T.reshape(T.matmul(T.reshape(diff, (-1, f)), T.reshape(w, (f, 1))), lead + (n, n)))
    return T.softmax_rows(logits)


def graph_learning_loss(X, A, lam: float = 0.001) -> Tensor:
    """Feature-smoothness penalty plus Frobenius sparsity term.

    sum_{m,n} ||x_m - x_n||^2 A_mn + lam * ||A||_F^2, averaged over any
    leading batch axes of ``X`` (..., N, F_d) and ``A`` (..., N, N).
    """
    X, A = T.as_tensor(X), T.as_tensor(A)
    if lam < 0:
        raise ParameterError("lam must be non-negative")
    lead, n, f = X.shape[:-2], X.shape[-2], X.shape[-1]
    # explicit differences: identical rows give exactly zero distance
    diff = T.reshape(X, lead + (n, 1, f)) - T.reshape(X, lead + (1, n, f))
    dist = T.sum(T.square(diff), axis=-1)
    per_graph = T.sum(dist * A, axis=(-2, -1)) + lam * T.sum(T.square(A), axis=(-2, -1))
    return T.mean(per_graph)


# -- spatial distance graph -----------------------------------------------------

def _pairwise_distances(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=-1))


def build_dc_adjacency(layout: ElectrodeLayout, sigma: float | str = "mean-distance") -> AdjacencyMatrix:
    """Gaussian distance kernel exp(-d^2 / 2 sigma^2) with a zero diagonal.

    ``sigma="mean-distance"`` uses the mean distance over distinct pairs.
    """
    if layout.n < 2:
        raise ParameterError("a distance graph needs at least 2 electrodes")
    d = _pairwise_distances(layout.coords)
    off = ~np.eye(layout.n, dtype=bool)
    if isinstance(sigma, str):
        if sigma != "mean-distance":
            raise ParameterError(f"unknown sigma mode {sigma!r}")
        sigma = d[off].mean()
        if sigma == 0:
            warnings.warn("all electrodes coincide; every distance weight is 1", DegenerateLayoutWarning)
            sigma = 1.0
    elif sigma <= 0:
        raise ParameterError("explicit sigma must be positive")
    A = np.exp(-d ** 2 / (2.0 * sigma ** 2))
    A[~off] = 0.0
    return AdjacencyMatrix(A, "distance-DC")


# -- fixed baselines ------------------------------------------------------------

def pcc_adjacency(signals: np.ndarray) -> np.ndarray:
    x = np.asarray(signals, dtype=np.float64)
    x = x - x.mean(axis=-1, keepdims=True)
    norms = np.sqrt((x ** 2).sum(axis=-1))
    denom = np.outer(norms, norms)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 0, (x @ x.T) / denom, 0.0)
    A = np.clip(np.abs(r), 0.0, 1.0)
    np.fill_diagonal(A, 0.0)
    return A


def plv_adjacency(signals: np.ndarray) -> np.ndarray:
    phase = np.angle(hilbert(np.asarray(signals, dtype=np.float64), axis=-1))
    z = np.exp(1j * phase)
    A = np.abs(z @ z.conj().T) / z.shape[-1]
    np.fill_diagonal(A, 0.0)
    return np.clip(A, 0.0, 1.0)


def _mutual_information(a: np.ndarray, b: np.ndarray, bins: int) -> float:
    joint, _, _ = np.histogram2d(a, b, bins=bins)
    p = joint / joint.sum()
    pa, pb = p.sum(axis=1), p.sum(axis=0)
    nz = p > 0
    return float((p[nz] * np.log(p[nz] / np.outer(pa, pb)[nz])).sum())


def mi_adjacency(signals: np.ndarray, bins: int = 16) -> np.ndarray:
    """Histogram mutual information in nats with ``bins`` equal-width bins per signal."""
    x = np.asarray(signals, dtype=np.float64)
    n = x.shape[0]
    A = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            A[i, j] = A[j, i] = max(_mutual_information(x[i], x[j], bins), 0.0)
    return A


def knn_adjacency(features: np.ndarray, k: int) -> np.ndarray:
    """Binary k-nearest-neighbour graph, symmetrised by union."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k < n:
        raise ParameterError(f"knn needs 1 <= k < N, got k={k}, N={n}")
    d = _pairwise_distances(x)
    np.fill_diagonal(d, np.inf)
    nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
    A = np.zeros((n, n))
    A[np.repeat(np.arange(n), k), nearest.ravel()] = 1.0
    return np.maximum(A, A.T)


def baseline_adjacency(kind: str, *, n: int | None = None, features=None, signals=None,
                       k: int = 2, bins: int = 16) -> AdjacencyMatrix:
    """Fixed adjacency baselines.

    full: ``n`` only (all ones, self-loops included). knn: ``features`` (N, F)
    and ``k``. pcc/plv/mi: raw ``signals`` (N, L).
    """
    if kind == "full":
        if n is None:
            raise ParameterError("full adjacency needs n")
        return AdjacencyMatrix(np.ones((n, n)), "full")
    if kind == "knn":
        if features is None:
            raise ParameterError("knn adjacency needs node features")
        return AdjacencyMatrix(knn_adjacency(features, k), "knn")
    if signals is None:
        raise ParameterError(f"{kind} adjacency needs raw signals")
    if kind == "pcc":
        return AdjacencyMatrix(pcc_adjacency(signals), "pcc")
    if kind == "plv":
        return AdjacencyMatrix(plv_adjacency(signals), "plv")
    if kind == "mi":
        return AdjacencyMatrix(mi_adjacency(signals, bins), "mi")
    raise ParameterError(f"unknown baseline adjacency {kind!r}")


# -- Laplacian and Chebyshev polynomials ---------------------------------------

def _start_vector(n: int) -> np.ndarray:
    v = np.random.default_rng(12345).uniform(0.5, 1.5, n) * np.where(np.arange(n) % 2, -1.0, 1.0)
    return v / np.linalg.norm(v)


def power_iteration(M, tol: float = 1e-9, max_iter: int = 10_000, squarings: int = 48):
    """Largest eigenvalue and unit eigenvector of symmetric PSD matrices (..., n, n).

    The power method is first run on M^(2^s) by repeated squaring, which
    separates clustered top eigenvalues (common for near-uniform learned
    graphs) in a few dozen matrix products; plain power steps then polish
    the iterate. Stops once every Rayleigh quotient changes by less than
    tol * max(1, |lambda|) and the residual ||Mv - lambda v|| is below the
    same bound. ``max_iter`` caps the number of polishing steps.
    """
    M = np.asarray(M, dtype=np.float64)
    n = M.shape[-1]
    v0 = np.broadcast_to(_start_vector(n), M.shape[:-1])
    fro = np.linalg.norm(M, axis=(-2, -1), keepdims=True)
    P = M / np.where(fro > 0, fro, 1.0)
    for _ in range(squarings):
        nxt = P @ P
        nrm = np.linalg.norm(nxt, axis=(-2, -1), keepdims=True)
        nxt = nxt / np.where(nrm > 0, nrm, 1.0)
        if np.abs(nxt - P).max(initial=0.0) <= tol * 1e-3:
            P = nxt
            break
        P = nxt
    v = np.einsum("...ij,...j->...i", P, v0)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    # start vector orthogonal to the top eigenvector: fall back to the largest column
    best_col = np.take_along_axis(
        P, np.linalg.norm(P, axis=-2).argmax(axis=-1)[..., None, None], axis=-1)[..., 0]
    v = np.where(norm > 1e-150, v / np.where(norm > 0, norm, 1.0), best_col)
    vn = np.linalg.norm(v, axis=-1, keepdims=True)
    v = np.where(vn > 0, v / np.where(vn > 0, vn, 1.0), v0)
    lam = np.full(M.shape[:-2], np.inf)
    for _ in range(max_iter):
        w = np.einsum("...ij,...j->...i", M, v)
        new = np.einsum("...i,...i->...", v, w)
        scale = tol * np.maximum(1.0, np.abs(new))
        residual = np.linalg.norm(w - new[..., None] * v, axis=-1)
        done = (np.abs(new - lam) <= scale) & (residual <= scale)
        lam = new
        if np.all(done):
            break
        norm = np.linalg.norm(w, axis=-1, keepdims=True)
        v = np.where(norm > 0, w / np.where(norm > 0, norm, 1.0), v)
    return lam, v


def _lambda_max(L: Tensor) -> tuple[Tensor, np.ndarray]:
    lam, v = power_iteration(L.data)
    degenerate = lam < 1e-12
    if np.any(degenerate):
        warnings.warn("edgeless graph: largest Laplacian eigenvalue ~0, falling back to 2",
                      DegenerateGraphWarning)
    safe = np.where(degenerate, 2.0, lam)
    outer = np.einsum("...i,...j->...ij", v, v)

    def backward(g):
        return (np.where(degenerate[..., None, None], 0.0, g[..., None, None] * outer),)

    return T._result(safe, (L,), backward), degenerate


def scaled_laplacian(A) -> Tensor:
    """(2 / lambda_max) L - I with L = D - (A + A^T)/2; differentiable in ``A``.

    Accepts an :class:`AdjacencyMatrix`, an array, or a tensor of shape
    (..., N, N). lambda_max comes from power iteration.
    """
    if isinstance(A, AdjacencyMatrix):
        A = A.weights
    A = T.as_tensor(A)
    n = A.shape[-1]
    if A.ndim < 2 or A.shape[-2] != n:
        raise DimensionError(f"adjacency must be square, got {A.shape}")
    if np.any(A.data < 0):
        raise ParameterError("adjacency weights must be non-negative")
    axes = tuple(range(A.ndim - 2)) + (A.ndim - 1, A.ndim - 2)
    S = (A + T.transpose(A, axes)) * 0.5
    eye = np.eye(n)
    L = T.reshape(T.sum(S, axis=-1), S.shape[:-1] + (1,)) * eye - S
    lam, _ = _lambda_max(L)
    return L * T.reshape(2.0 / lam, lam.shape + (1, 1)) - eye


def cheb_stack(L_scaled, K: int) -> ChebStack:
    """Chebyshev polynomials T_0..T_{K-1} of a scaled Laplacian (..., N, N)."""
    if K < 1:
        raise ParameterError(f"Chebyshev order K must be >= 1, got {K}")
    L = T.as_tensor(L_scaled)
    eye = T.Tensor(np.broadcast_to(np.eye(L.shape[-1]), L.shape).copy())
    polys = [eye]
    if K > 1:
        polys.append(L)
    for _ in range(2, K):
        polys.append(2.0 * T.matmul(L, polys[-1]) - polys[-2])
    return ChebStack(polys)
