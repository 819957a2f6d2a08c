import copy
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mstgcn import graph as G
from mstgcn import tensor as T
from mstgcn.errors import ContextError, DegenerateGraphWarning, DimensionError, ParameterError
from mstgcn.features import FeatureNetConfig
from mstgcn.stgcn import (MSTGCN, ModelConfig, cheb_graph_conv, fuse_views, mstgcn_forward, spatial_attention,
                          temporal_attention, temporal_attention_apply, temporal_conv)


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention_params(rng, N, C, Tn):
    return {
        "Z1": rng.normal(size=Tn), "Z2": rng.normal(size=(C, Tn)), "Z3": rng.normal(size=C),
        "V_p": rng.normal(size=(N, N)), "b_p": rng.normal(size=(N, N)),
        "M1": rng.normal(size=N), "M2": rng.normal(size=(C, N)), "M3": rng.normal(size=C),
        "V_q": rng.normal(size=(Tn, Tn)), "b_q": rng.normal(size=(Tn, Tn)),
    }


def toy_config(**kw):
    base = dict(n_channels=3, n_domains=2, d=1, K=2, layers=1, cheb_filters=3, time_filters=3,
                feature=FeatureNetConfig.toy())
    base.update(kw)
    return ModelConfig(**base)


def line_dc(n):
    coords = np.arange(n, dtype=float)
    A = np.exp(-(coords[:, None] - coords[None]) ** 2 / 2)
    np.fill_diagonal(A, 0)
    return A


# -- spatial attention ------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3, 2, 4), elements=st.floats(-20, 20)), st.integers(0, 1000))
def test_attention_outputs_row_stochastic(x, seed):
    p = attention_params(np.random.default_rng(seed), 3, 2, 4)
    P = spatial_attention(x, p).data
    Q = temporal_attention(x, p).data
    assert P.shape == (2, 3, 3) and Q.shape == (2, 4, 4)
    for M in (P, Q):
        assert np.all(M >= 0)
        assert np.allclose(M.sum(axis=-1), 1.0, atol=1e-9)


def test_spatial_zero_params_uniform():
    p = attention_params(np.random.default_rng(0), 4, 2, 3)
    p["V_p"] = np.zeros((4, 4))
    p["b_p"] = np.zeros((4, 4))
    P = spatial_attention(np.random.default_rng(1).normal(size=(1, 4, 2, 3)), p).data
    assert np.allclose(P, 0.25, rtol=0, atol=1e-15)


def test_spatial_two_node_hand_case():
    x = np.array([1.0, 2.0]).reshape(1, 2, 1, 1)
    p = {"Z1": np.array([0.5]), "Z2": np.array([[2.0]]), "Z3": np.array([-1.0]),
         "V_p": np.array([[1.0, 0.5], [0.0, 2.0]]), "b_p": np.array([[0.1, 0.0], [0.0, -0.1]])}
    # score_mn = (x_m * 0.5 * 2) * (-x_n)
    score = np.array([[-1.0, -2.0], [-2.0, -4.0]])
    S = sigmoid(score + p["b_p"])
    expected = softmax(p["V_p"] @ S)
    assert np.allclose(spatial_attention(x, p).data[0], expected, atol=1e-15)


def test_spatial_shape_mismatch():
    p = attention_params(np.random.default_rng(0), 3, 2, 4)
    with pytest.raises(DimensionError):
        spatial_attention(np.zeros((1, 3, 2, 5)), p)


# -- temporal attention ------------------------------------------------------------

def test_temporal_zero_vq_gives_time_mean():
    rng = np.random.default_rng(2)
    p = attention_params(rng, 3, 2, 4)
    p["V_q"] = np.zeros((4, 4))
    x = rng.normal(size=(2, 3, 2, 4))
    out, Q = temporal_attention_apply(x, p)
    assert np.allclose(out.data, np.broadcast_to(x.mean(axis=-1, keepdims=True), x.shape), atol=1e-14)


def test_temporal_identity_mixing():
    rng = np.random.default_rng(3)
    p = attention_params(rng, 2, 1, 3)
    # huge diagonal V_q with saturated sigmoid forces Q' to the identity
    p["V_q"] = np.eye(3) * 1e4
    p["b_q"] = np.eye(3) * 1e3 - 1e3
    x = rng.normal(size=(1, 2, 1, 3)) * 0.01
    out, Q = temporal_attention_apply(x, p)
    assert np.allclose(Q.data[0], np.eye(3), atol=1e-12)
    assert np.allclose(out.data, x, atol=1e-12)


def test_temporal_two_step_hand_case():
    x = np.array([[1.0, 3.0]]).reshape(1, 1, 1, 2)
    p = {"M1": np.array([1.0]), "M2": np.array([[1.0]]), "M3": np.array([0.5]),
         "V_q": np.array([[1.0, 0.0], [1.0, 1.0]]), "b_q": np.zeros((2, 2))}
    # score_tu = x_t * 0.5 x_u
    score = 0.5 * np.outer([1.0, 3.0], [1.0, 3.0])
    Q = softmax(p["V_q"] @ sigmoid(score))
    out, Qt = temporal_attention_apply(x, p)
    assert np.allclose(Qt.data[0], Q, atol=1e-15)
    expected = [1.0 * Q[0, 0] + 3.0 * Q[1, 0], 1.0 * Q[0, 1] + 3.0 * Q[1, 1]]
    assert np.allclose(out.data.ravel(), expected, atol=1e-15)


def test_temporal_single_step_is_identity():
    rng = np.random.default_rng(4)
    p = attention_params(rng, 3, 2, 1)
    x = rng.normal(size=(2, 3, 2, 1))
    out, Q = temporal_attention_apply(x, p)
    assert np.array_equal(Q.data, np.ones((2, 1, 1)))
    assert np.allclose(out.data, x, atol=0)


# -- Chebyshev graph convolution ------------------------------------------------------

def test_cheb_k1_identity():
    x = np.random.default_rng(5).normal(size=(2, 4, 3, 5))
    out = cheb_graph_conv(x, G.cheb_stack(np.eye(4), 1), np.eye(3)[None], np.ones((2, 4, 4)))
    assert np.allclose(out.data, x, atol=1e-15)


def test_cheb_matches_brute_force_sum():
    rng = np.random.default_rng(6)
    A = rng.random((5, 5))
    Ls = G.scaled_laplacian(A + A.T).data
    polys = [p.data for p in G.cheb_stack(Ls, 3).polys]
    theta = rng.normal(size=(3, 2, 4))
    x = rng.normal(size=(1, 5, 2, 3))
    out = cheb_graph_conv(x, polys, theta, None).data
    for t in range(3):
        expected = sum(polys[k] @ x[0, :, :, t] @ theta[k] for k in range(3))
        assert np.allclose(out[0, :, :, t], expected, atol=1e-9)


def test_cheb_attention_is_hadamard():
    rng = np.random.default_rng(7)
    polys = [np.eye(3), rng.normal(size=(3, 3))]
    P = softmax(rng.normal(size=(1, 3, 3)))
    theta = rng.normal(size=(2, 2, 2))
    x = rng.normal(size=(1, 3, 2, 2))
    out = cheb_graph_conv(x, polys, theta, P).data
    expected = sum((polys[k] * P[0]) @ x[0, :, :, 0] @ theta[k] for k in range(2))
    assert np.allclose(out[0, :, :, 0], expected, atol=1e-12)


def test_cheb_spectral_oracle():
    rng = np.random.default_rng(8)
    for _ in range(20):
        A = rng.random((5, 5))
        Ls = G.scaled_laplacian((A + A.T) / 2).data
        theta = rng.normal(size=(3, 1, 1))
        x = rng.normal(size=(1, 5, 1, 1))
        out = cheb_graph_conv(x, G.cheb_stack(Ls, 3), theta, np.ones((1, 5, 5))).data[0, :, 0, 0]
        lam, U = np.linalg.eigh(Ls)
        gain = sum(theta[k, 0, 0] * np.cos(k * np.arccos(np.clip(lam, -1, 1))) for k in range(3))
        assert np.allclose(out, U @ (gain * (U.T @ x[0, :, 0, 0])), atol=1e-6)


def test_cheb_edgeless_cancels():
    with pytest.warns(DegenerateGraphWarning):
        Ls = G.scaled_laplacian(np.zeros((3, 3)))
    x = np.random.default_rng(9).normal(size=(1, 3, 2, 2))
    theta = np.stack([np.eye(2), np.eye(2)])
    out = cheb_graph_conv(x, G.cheb_stack(Ls, 2), theta, np.ones((1, 3, 3))).data
    assert np.allclose(out, 0.0, atol=1e-15)


def test_cheb_per_step_polynomials():
    rng = np.random.default_rng(10)
    B, N, Tn = 2, 3, 2
    polys = [np.broadcast_to(np.eye(N), (B, Tn, N, N)).copy(), rng.normal(size=(B, Tn, N, N))]
    theta = rng.normal(size=(2, 2, 3))
    x = rng.normal(size=(B, N, 2, Tn))
    out = cheb_graph_conv(x, polys, theta, None).data
    for b in range(B):
        for t in range(Tn):
            expected = sum(polys[k][b, t] @ x[b, :, :, t] @ theta[k] for k in range(2))
            assert np.allclose(out[b, :, :, t], expected, atol=1e-12)


def test_cheb_order_mismatch():
    with pytest.raises(ParameterError):
        cheb_graph_conv(np.zeros((1, 2, 1, 1)), G.cheb_stack(np.eye(2), 2), np.zeros((3, 1, 1)), None)


# -- temporal convolution -----------------------------------------------------------

def test_temporal_conv_identity_kernel():
    x = np.random.default_rng(11).normal(size=(2, 3, 4, 5))
    out = temporal_conv(x, np.eye(4)[:, :, None], kernel=1).data
    assert np.array_equal(out, np.maximum(x, 0))


def test_temporal_conv_keeps_length():
    x = np.random.default_rng(12).normal(size=(1, 2, 3, 7))
    for k in (1, 2, 3, 4):
        assert temporal_conv(x, np.ones((5, 3, k))).shape == (1, 2, 5, 7)


def test_temporal_conv_three_tap_hand_case():
    x = np.array([1.0, -2.0, 3.0]).reshape(1, 1, 1, 3)
    phi = np.array([0.5, 1.0, -0.25]).reshape(1, 1, 3)
    r = np.array([0.0, 1.0, 0.0, 3.0, 0.0])            # padded ReLU(x)
    expected = [max(0.0, r[t:t + 3] @ phi[0, 0]) for t in range(3)]
    assert np.allclose(temporal_conv(x, phi).data.ravel(), expected, atol=1e-15)


def test_temporal_conv_kernel_too_long():
    with pytest.raises(ParameterError):
        temporal_conv(np.zeros((1, 1, 1, 2)), np.ones((1, 1, 3)))


# -- fusion ----------------------------------------------------------------------------

def test_fuse_shapes_and_order():
    rng = np.random.default_rng(13)
    a, b = rng.normal(size=(2, 3, 4, 5)), np.zeros((2, 3, 6, 5))
    out = fuse_views(a, b).data
    assert out.shape == (2, 3, 10, 5)
    assert np.array_equal(out[:, :, :4], a)


def test_fuse_mismatch():
    with pytest.raises(DimensionError):
        fuse_views(np.zeros((1, 3, 2, 5)), np.zeros((1, 3, 2, 4)))


def test_fuse_gradient_splits():
    a = T.Tensor(np.zeros((1, 2, 2, 3)), requires_grad=True)
    b = T.Tensor(np.zeros((1, 2, 1, 3)), requires_grad=True)
    with T.Tape() as tape:
        y = T.sum(fuse_views(a, b))
    tape.backward(y)
    assert np.array_equal(a.grad, np.ones(a.shape)) and np.array_equal(b.grad, np.ones(b.shape))


# -- model --------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_model():
    return MSTGCN(toy_config(), line_dc(3), np.random.default_rng(0))


def test_forward_probabilities(toy_model):
    x = np.random.default_rng(14).normal(size=(4, 3, 3, 300))
    out = toy_model.forward(x)
    assert out.class_probs.shape == (4, 5) and out.domain_probs.shape == (4, 2)
    assert np.allclose(out.class_probs.data.sum(axis=1), 1.0, atol=1e-12)
    assert out.readout.shape == (4, 6)
    assert out.aux["A_fc"].shape == (4, 3, 3, 3)
    assert out.aux["fc.l0.temporal"].shape == (4, 3, 3)
    assert out.aux["dc.l0.spatial"].shape == (4, 3, 3)


def test_single_window_entry_point(toy_model):
    x = np.random.default_rng(15).normal(size=(3, 3, 300))
    out = mstgcn_forward(x, toy_model)
    assert out.class_probs.shape == (1, 5)


def test_wrong_window_length(toy_model):
    with pytest.raises(ContextError, match="2d\\+1 = 3"):
        toy_model.forward(np.zeros((1, 2, 3, 300)))


def test_forward_indexed_matches_forward(toy_model):
    rng = np.random.default_rng(16)
    epochs = rng.normal(size=(5, 3, 300))
    index = np.array([[0, 0, 1], [0, 1, 2], [3, 4, 4]])
    a = toy_model.forward_indexed(epochs, index).class_probs.data
    b = toy_model.forward(epochs[index]).class_probs.data
    assert np.allclose(a, b, atol=1e-12)


def test_d_zero_window():
    model = MSTGCN(toy_config(d=0), line_dc(3), np.random.default_rng(1))
    out = model.forward(np.random.default_rng(2).normal(size=(2, 1, 3, 300)))
    assert np.array_equal(out.aux["fc.l0.temporal"].data, np.ones((2, 1, 1)))
    assert np.allclose(out.class_probs.data.sum(axis=1), 1.0)


def test_multi_layer_and_hidden_head():
    model = MSTGCN(toy_config(layers=2, head_hidden=4), line_dc(3), np.random.default_rng(3))
    out = model.forward(np.random.default_rng(4).normal(size=(2, 3, 3, 300)))
    assert "fc.l1.spatial" in out.aux
    assert "head.y.hidden.w" in model.params


def test_fixed_mode_requires_matrix():
    with pytest.raises(ParameterError):
        MSTGCN(toy_config(adjacency="full"), line_dc(3), np.random.default_rng(0))
    model = MSTGCN(toy_config(adjacency="full"), line_dc(3), np.random.default_rng(0),
                   fixed_adjacency=np.ones((3, 3)))
    out = model.forward(np.random.default_rng(5).normal(size=(1, 3, 3, 300)))
    assert "A_fc" not in out.aux and out.graph_loss.item() == 0.0


def test_parameter_groups(toy_model):
    groups = ("features", "graph", "fc", "dc", "label", "domain")
    names = [n for g in groups for n in toy_model.group(g)]
    assert sorted(names) == sorted(toy_model.params)
    assert set(toy_model.extractor_names()) == set(names) - set(toy_model.group("label")) - set(
        toy_model.group("domain"))


def permuted_model(model, perm):
    """Copy of ``model`` with every node-indexed parameter permuted."""
    clone = copy.deepcopy(model)
    p = clone.params
    for view in ("fc", "dc"):
        pre = f"{view}.l0."
        for key in ("V_p", "b_p"):
            p[pre + key].data = p[pre + key].data[np.ix_(perm, perm)]
        p[pre + "M1"].data = p[pre + "M1"].data[perm]
        p[pre + "M2"].data = p[pre + "M2"].data[:, perm]
    dc = model.dc_adjacency[np.ix_(perm, perm)]
    clone.dc_adjacency = dc
    clone.dc_stack = [q.data for q in G.cheb_stack(G.scaled_laplacian(dc), model.config.K).polys]
    return clone


def test_node_permutation_consistency(toy_model):
    rng = np.random.default_rng(17)
    x = rng.normal(size=(3, 3, 3, 300))
    perm = np.array([2, 0, 1])
    base = toy_model.forward(x).class_probs.data
    moved = permuted_model(toy_model, perm).forward(x[:, :, perm]).class_probs.data
    assert np.allclose(base, moved, atol=1e-9)


def test_full_model_gradients():
    rng = np.random.default_rng(18)
    model = MSTGCN(toy_config(), line_dc(3), rng)
    x = rng.normal(size=(2, 3, 3, 300))
    y = np.eye(5)[[1, 4]]
    names = ["graph.w", "fc.l0.Z1", "fc.l0.Z2", "fc.l0.b_p", "fc.l0.M1", "fc.l0.V_q", "fc.l0.theta",
             "dc.l0.phi", "dc.l0.M3", "head.y.w", "head.y.b", "feat.small.conv1.w", "feat.large.conv0.w"]

    def loss():
        out = model.forward(x)
        return T.cross_entropy(out.class_probs, y) + 0.1 * out.graph_loss

    err = T.grad_check_params(loss, [model.params[n] for n in names], max_coords=4, rng=rng)
    assert err < 1e-4


def test_bn_state_roundtrip(toy_model):
    state = toy_model.bn_state()
    clone = copy.deepcopy(toy_model)
    first = next(iter(state))
    clone.feature_net.bn[first].running_mean[:] = 5.0
    clone.load_bn_state(state)
    assert np.array_equal(clone.feature_net.bn[first].running_mean, state[first][0])


def test_kernel_clamped_to_window():
    cfg = toy_config(d=0, time_kernel=3)
    assert cfg.effective_kernel == 1
    model = MSTGCN(cfg, line_dc(3), np.random.default_rng(6))
    assert model.params["fc.l0.phi"].shape[2] == 1


def test_config_validation():
    with pytest.raises(ParameterError):
        MSTGCN(toy_config(adjacency="nope"), line_dc(3), np.random.default_rng(0))
    with pytest.raises(DimensionError):
        MSTGCN(toy_config(), line_dc(4), np.random.default_rng(0))


def test_no_degenerate_warning_in_forward(toy_model):
    with warnings.catch_warnings():
        warnings.simplefilter("error", DegenerateGraphWarning)
        toy_model.forward(np.random.default_rng(19).normal(size=(1, 3, 3, 300)))
