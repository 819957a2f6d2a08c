import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mstgcn import graph as G
from mstgcn import tensor as T
from mstgcn.errors import DegenerateGraphWarning, DegenerateLayoutWarning, DimensionError, ParameterError
from mstgcn.graph import AdjacencyMatrix, ElectrodeLayout


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


# -- learned FC adjacency ----------------------------------------------------------

def test_fc_identical_features_uniform():
    A = G.learn_fc_adjacency(np.ones((4, 3)), np.array([0.3, 1.0, 2.0])).data
    assert np.array_equal(A, np.full((4, 4), 0.25))


def test_fc_zero_weights_uniform():
    X = np.random.default_rng(0).normal(size=(5, 2))
    assert np.allclose(G.learn_fc_adjacency(X, np.zeros(2)).data, 0.2, atol=0, rtol=1e-15)


def test_fc_two_node_hand_case():
    A = G.learn_fc_adjacency(np.array([[0.0], [1.0]]), np.array([np.log(3.0)])).data
    assert np.allclose(A[0], [0.25, 0.75], atol=1e-12)
    assert np.allclose(A[1], [0.75, 0.25], atol=1e-12)


def test_fc_dimension_mismatch():
    with pytest.raises(DimensionError):
        G.learn_fc_adjacency(np.ones((3, 4)), np.ones(3))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(-100, 100)),
       arrays(np.float64, 3, elements=st.floats(-5, 5)))
def test_fc_row_stochastic(X, w):
    A = G.learn_fc_adjacency(X, w).data
    assert np.all(A >= 0)
    assert np.allclose(A.sum(axis=1), 1.0, atol=1e-6)


def test_fc_permutation_equivariance():
    rng = np.random.default_rng(1)
    X, w = rng.normal(size=(6, 4)), rng.random(4)
    P = np.eye(6)[rng.permutation(6)]
    assert np.allclose(G.learn_fc_adjacency(P @ X, w).data, P @ G.learn_fc_adjacency(X, w).data @ P.T,
                       atol=1e-14)


def test_fc_batched_matches_single():
    rng = np.random.default_rng(2)
    X, w = rng.normal(size=(3, 2, 4, 5)), rng.random(5)
    batched = G.learn_fc_adjacency(X, w).data
    assert np.allclose(batched[1, 0], G.learn_fc_adjacency(X[1, 0], w).data)


def test_fc_gradient():
    rng = np.random.default_rng(3)
    X = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    w = T.Tensor(rng.uniform(0.1, 1, 3), requires_grad=True)
    c = rng.normal(size=(4, 4))
    assert T.grad_check_params(lambda: T.sum(G.learn_fc_adjacency(X, w) * c), [X, w]) < 1e-6


def test_graph_params_init():
    p = G.GraphLearnParams.init(7, np.random.default_rng(0))
    assert p.w.shape == (7,) and p.w.requires_grad


# -- graph learning loss ------------------------------------------------------------

def test_loss_identical_uniform_equals_lambda():
    N = 5
    assert G.graph_learning_loss(np.ones((N, 3)), np.full((N, N), 1 / N)).item() == pytest.approx(0.001, abs=1e-15)


def test_loss_zero_lambda():
    assert G.graph_learning_loss(np.ones((3, 2)), np.full((3, 3), 1 / 3), lam=0.0).item() == 0.0


def test_loss_two_node_hand_case():
    X = np.array([[0.0], [1.0]])
    A = G.learn_fc_adjacency(X, np.array([np.log(3.0)]))
    expected = 0.75 + 0.75 + 0.001 * (0.25 ** 2 + 0.75 ** 2) * 2
    assert G.graph_learning_loss(X, A).item() == pytest.approx(expected, abs=1e-12)


def test_loss_negative_lambda():
    with pytest.raises(ParameterError):
        G.graph_learning_loss(np.ones((2, 2)), np.eye(2), lam=-1.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 2), elements=st.floats(-10, 10)),
       arrays(np.float64, (4, 4), elements=st.floats(0, 1)),
       st.floats(0, 1))
def test_loss_non_negative(X, A, lam):
    assert G.graph_learning_loss(X, A, lam).item() >= 0


# -- distance graph ------------------------------------------------------------------

def test_dc_coincident_pair_weight_one():
    layout = ElectrodeLayout(["a", "b", "c"], [[0, 0, 0], [0, 0, 0], [1, 0, 0]])
    A = G.build_dc_adjacency(layout).weights
    assert A[0, 1] == 1.0 and A[0, 0] == 0.0


def test_dc_collinear_hand_case():
    layout = ElectrodeLayout(["a", "b", "c"], [[0, 0, 0], [1, 0, 0], [2, 0, 0]])
    A = G.build_dc_adjacency(layout, sigma=1.0).weights
    assert A[0, 2] == pytest.approx(np.exp(-2.0), abs=1e-15)
    assert A[0, 1] == pytest.approx(np.exp(-0.5), abs=1e-15)


def test_dc_far_electrodes_vanish():
    layout = ElectrodeLayout(["a", "b"], [[0, 0, 0], [1e3, 0, 0]])
    assert G.build_dc_adjacency(layout, sigma=1.0).weights[0, 1] == 0.0


def test_dc_mean_distance_sigma():
    layout = ElectrodeLayout(["a", "b", "c"], [[0, 0, 0], [1, 0, 0], [2, 0, 0]])
    sigma = 4.0 / 3.0
    assert G.build_dc_adjacency(layout).weights[0, 2] == pytest.approx(np.exp(-4 / (2 * sigma ** 2)))


def test_dc_all_coincident_warns():
    layout = ElectrodeLayout(["a", "b"], np.zeros((2, 3)))
    with pytest.warns(DegenerateLayoutWarning):
        A = G.build_dc_adjacency(layout).weights
    assert A[0, 1] == 1.0


def test_dc_needs_two_electrodes():
    with pytest.raises(ParameterError):
        G.build_dc_adjacency(ElectrodeLayout(["a"], np.zeros((1, 3))))


def test_dc_rigid_motion_invariance():
    rng = np.random.default_rng(4)
    coords = rng.normal(size=(6, 3))
    names = list("abcdef")
    moved = coords @ random_rotation(rng).T + rng.normal(size=3) * 10
    a = G.build_dc_adjacency(ElectrodeLayout(names, coords)).weights
    b = G.build_dc_adjacency(ElectrodeLayout(names, moved)).weights
    assert np.allclose(a, b, atol=1e-9)
    assert np.allclose(a, a.T, atol=1e-12)


def test_layout_validation():
    with pytest.raises(ParameterError):
        ElectrodeLayout(["a", "a"], np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        ElectrodeLayout(["a", "b"], np.zeros((3, 3)))
    with pytest.raises(ParameterError):
        ElectrodeLayout(["a"], [[np.nan, 0, 0]])


def test_adjacency_matrix_validation():
    with pytest.raises(ParameterError):
        AdjacencyMatrix(-np.eye(2), "full")
    with pytest.raises(ParameterError):
        AdjacencyMatrix(np.eye(2), "bogus")
    assert AdjacencyMatrix(np.eye(3), "full").n == 3


# -- fixed baselines ------------------------------------------------------------------

def test_full_baseline():
    assert np.array_equal(G.baseline_adjacency("full", n=3).weights, np.ones((3, 3)))


def test_pcc_negation_is_one():
    x = np.random.default_rng(5).normal(size=200)
    A = G.baseline_adjacency("pcc", signals=np.stack([x, -x])).weights
    assert A[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert A[0, 0] == 0.0


def test_pcc_constant_signal_is_zero():
    x = np.random.default_rng(6).normal(size=100)
    A = G.pcc_adjacency(np.stack([x, np.full(100, 3.0)]))
    assert A[0, 1] == 0.0


def test_plv_identical_sinusoids():
    t = np.arange(3000) / 100.0
    x = np.sin(2 * np.pi * 5 * t)
    assert G.plv_adjacency(np.stack([x, x]))[0, 1] == pytest.approx(1.0, abs=1e-9)


def test_mi_independent_noise_is_small():
    rng = np.random.default_rng(7)
    A = G.mi_adjacency(rng.uniform(size=(2, 10_000)))
    assert A[0, 1] < 0.05


def test_mi_identical_signal_is_large():
    x = np.random.default_rng(8).uniform(size=5000)
    assert G.mi_adjacency(np.stack([x, x]))[0, 1] > 2.0


def test_knn_union_symmetrised():
    feats = np.array([[0.0], [1.0], [1.5], [10.0]])
    A = G.baseline_adjacency("knn", features=feats, k=1).weights
    expected = np.zeros((4, 4))
    for i, j in ((0, 1), (1, 2), (3, 2)):
        expected[i, j] = expected[j, i] = 1
    assert np.array_equal(A, expected)


def test_knn_k_too_large():
    with pytest.raises(ParameterError):
        G.baseline_adjacency("knn", features=np.zeros((3, 2)), k=3)


def test_baseline_symmetry():
    sig = np.random.default_rng(9).normal(size=(4, 500))
    for kind in ("pcc", "plv", "mi"):
        A = G.baseline_adjacency(kind, signals=sig).weights
        assert np.allclose(A, A.T, atol=1e-9), kind
        assert np.all(A >= 0)


def test_baseline_missing_inputs():
    with pytest.raises(ParameterError):
        G.baseline_adjacency("pcc")
    with pytest.raises(ParameterError):
        G.baseline_adjacency("unknown", signals=np.zeros((2, 3)))


# -- Laplacian and Chebyshev -----------------------------------------------------------

def test_scaled_laplacian_two_node():
    Ls = G.scaled_laplacian(np.array([[0.0, 1.0], [1.0, 0.0]])).data
    assert np.allclose(Ls, [[0.0, -1.0], [-1.0, 0.0]], atol=1e-12)


def test_scaled_laplacian_edgeless_fallback():
    with pytest.warns(DegenerateGraphWarning):
        Ls = G.scaled_laplacian(np.zeros((3, 3))).data
    assert np.array_equal(Ls, -np.eye(3))


def test_scaled_laplacian_spectrum_in_unit_interval():
    rng = np.random.default_rng(10)
    for _ in range(20):
        A = rng.random((6, 6))
        A = (A + A.T) / 2
        lam = np.linalg.eigvalsh(G.scaled_laplacian(A).data)
        assert lam.min() >= -1 - 1e-6 and lam.max() <= 1 + 1e-6
        assert lam.max() == pytest.approx(1.0, abs=1e-6)


def test_scaled_laplacian_symmetrises():
    A = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    Ls = G.scaled_laplacian(A).data
    assert np.allclose(Ls, Ls.T)


def test_scaled_laplacian_rejects_negative():
    with pytest.raises(ParameterError):
        G.scaled_laplacian(-np.ones((2, 2)))


def test_scaled_laplacian_gradient():
    rng = np.random.default_rng(11)
    A = T.Tensor(rng.uniform(0.1, 1, (4, 4)), requires_grad=True)
    c = rng.normal(size=(4, 4))
    assert T.grad_check_params(lambda: T.sum(G.scaled_laplacian(A) * c), [A]) < 1e-6


def test_power_iteration_matches_eigh():
    rng = np.random.default_rng(12)
    for _ in range(10):
        B = rng.normal(size=(7, 7))
        M = B @ B.T
        lam, v = G.power_iteration(M)
        assert lam == pytest.approx(np.linalg.eigvalsh(M).max(), rel=1e-9)
        assert np.allclose(M @ v, lam * v, atol=1e-7 * lam)


def test_power_iteration_clustered_top_eigenvalues():
    lam_true = np.array([1.0, 0.999999, 0.5, 0.1])
    q = random_rotation(np.random.default_rng(13))
    Q = np.eye(4)
    Q[:3, :3] = q
    lam, _ = G.power_iteration(Q @ np.diag(lam_true) @ Q.T)
    assert lam == pytest.approx(1.0, abs=1e-9)


def test_cheb_k1():
    stack = G.cheb_stack(np.diag([0.5, -0.5]), 1)
    assert stack.K == 1 and np.array_equal(stack.polys[0].data, np.eye(2))


def test_cheb_diagonal_k3():
    stack = G.cheb_stack(np.diag([0.5, -0.5]), 3)
    assert np.allclose(stack.polys[2].data, np.diag([-0.5, -0.5]), atol=1e-15)


def test_cheb_k_must_be_positive():
    with pytest.raises(ParameterError):
        G.cheb_stack(np.eye(2), 0)


@pytest.mark.parametrize("K", [2, 5, 8])
def test_cheb_matches_trigonometric_definition(K):
    rng = np.random.default_rng(K)
    A = rng.random((5, 5))
    Ls = G.scaled_laplacian((A + A.T) / 2).data
    lam, U = np.linalg.eigh(Ls)
    theta = np.arccos(np.clip(lam, -1, 1))
    stack = G.cheb_stack(Ls, K)
    for k, P in enumerate(stack.polys):
        assert np.allclose(P.data, U @ np.diag(np.cos(k * theta)) @ U.T, atol=1e-6)


def test_cheb_recurrence_invariant():
    rng = np.random.default_rng(14)
    A = rng.random((4, 4))
    Ls = G.scaled_laplacian(A + A.T).data
    p = [P.data for P in G.cheb_stack(Ls, 4).polys]
    assert np.array_equal(p[0], np.eye(4))
    assert np.array_equal(p[1], Ls)
    assert np.allclose(p[3], 2 * Ls @ p[2] - p[1], atol=1e-9)


def test_no_warning_on_regular_graph():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        G.scaled_laplacian(np.ones((3, 3)) - np.eye(3))
