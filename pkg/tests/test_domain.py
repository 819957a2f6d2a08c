import copy

import numpy as np
import pytest

from mstgcn import tensor as T
from mstgcn.domain import (GrlConfig, domain_classifier, grl, label_predictor, linear_probe_accuracy, one_hot,
                           total_loss)
from mstgcn.errors import DimensionError, LabelError, ParameterError
from mstgcn.features import FeatureNetConfig
from mstgcn.graph import graph_learning_loss
from mstgcn.stgcn import MSTGCN, ModelConfig
from mstgcn.training import OptimizerState, optimizer_step


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def make_model(seed=0, n_domains=3):
    cfg = ModelConfig(n_channels=3, n_domains=n_domains, d=1, K=2, cheb_filters=3, time_filters=3,
                      feature=FeatureNetConfig.toy())
    dc = np.array([[0.0, 0.6, 0.1], [0.6, 0.0, 0.6], [0.1, 0.6, 0.0]])
    return MSTGCN(cfg, dc, np.random.default_rng(seed))


@pytest.fixture(scope="module")
def batch():
    rng = np.random.default_rng(42)
    return rng.normal(size=(4, 3, 3, 300)), np.array([0, 2, 4, 1]), np.array([0, 1, 2, 1])


def grads_of(model, names, loss_fn):
    with T.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return {n: model.params[n].grad.copy() for n in names}


# -- gradient reversal --------------------------------------------------------------

def test_grl_forward_is_identity_bitwise():
    x = np.random.default_rng(0).normal(size=(5, 7)) * 1e10
    assert np.array_equal(grl(x, 3.0).data, x)


def test_grl_unit_scale():
    x = T.Tensor(np.ones(4), requires_grad=True)
    with T.Tape() as tape:
        y = T.sum(grl(x, 1.0))
    tape.backward(y)
    assert np.array_equal(x.grad, -np.ones(4))


def test_grl_half_scale_on_composed_function():
    rng = np.random.default_rng(1)
    x = T.Tensor(rng.normal(size=3), requires_grad=True)
    with T.Tape() as tape:
        y = T.sum(T.square(grl(x * 2.0, 0.5)))
    tape.backward(y)
    # finite difference of the same function without reversal
    h, base = 1e-6, x.data.copy()
    f = lambda v: np.sum((2 * v) ** 2)
    numeric = np.array([(f(base + h * e) - f(base - h * e)) / (2 * h) for e in np.eye(3)])
    assert np.allclose(x.grad, -0.5 * numeric, atol=1e-6)


def test_grl_config_schedule():
    cfg = GrlConfig(beta=0.1, warmup=10)
    assert cfg.scale(0) == 0.0
    assert cfg.scale(5) == pytest.approx(0.05)
    assert cfg.scale(30) == pytest.approx(0.1)
    assert GrlConfig(beta=0.2, warmup=0).scale(0) == 0.2
    with pytest.raises(ParameterError):
        GrlConfig(beta=-1.0)


# -- heads ------------------------------------------------------------------------------

def test_label_predictor_zero_weights_uniform():
    p = label_predictor(np.ones((3, 4)), np.zeros((4, 5)), np.zeros(5)).data
    assert np.allclose(p, 0.2, atol=0)


def test_label_predictor_hand_case():
    f = np.array([[1.0, 2.0]])
    w = np.array([[1.0, 0.0, -1.0, 0.5, 0.0], [0.0, 1.0, 1.0, 0.0, -2.0]])
    b = np.array([0.0, 0.1, 0.2, 0.3, 0.4])
    assert np.allclose(label_predictor(f, w, b).data, softmax(f @ w + b), atol=1e-15)


def test_domain_classifier_mirrors_label_head():
    rng = np.random.default_rng(2)
    f, w, b = rng.normal(size=(6, 4)), rng.normal(size=(4, 7)), rng.normal(size=7)
    probs = domain_classifier(f, w, b, 0.3).data
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    assert np.allclose(probs, softmax(f @ w + b), atol=1e-15)
    assert np.allclose(domain_classifier(f, np.zeros((4, 7)), np.zeros(7), 1.0).data, 1 / 7)


def test_head_dimension_mismatch():
    with pytest.raises(DimensionError):
        label_predictor(np.ones((2, 3)), np.zeros((4, 5)), np.zeros(5))


# -- loss -------------------------------------------------------------------------------------

def test_perfect_predictions_zero_loss():
    parts = total_loss(np.eye(5)[[1, 3]], [1, 3], np.eye(2)[[0, 1]], [0, 1], mu=0.0)
    assert parts.total.item() == 0.0


def test_uniform_predictions():
    parts = total_loss(np.full((2, 5), 0.2), [0, 4], np.full((2, 10), 0.1), [3, 9], mu=0.0)
    assert parts.total.item() == pytest.approx(np.log(5) + np.log(10), abs=1e-12)
    assert parts.total.item() == pytest.approx(3.912, abs=1e-3)


def test_composed_with_graph_loss():
    g = graph_learning_loss(np.ones((4, 3)), np.full((4, 4), 0.25))
    parts = total_loss(np.full((1, 5), 0.2), [2], np.full((1, 10), 0.1), [0], g, mu=1.0)
    assert parts.total.item() == pytest.approx(np.log(5) + np.log(10) + 0.001, abs=1e-12)
    assert parts.graph == pytest.approx(0.001)


def test_invalid_labels():
    with pytest.raises(LabelError):
        total_loss(np.full((1, 5), 0.2), [5], np.full((1, 2), 0.5), [0])
    with pytest.raises(LabelError):
        one_hot(np.array([0.5]), 3)


def test_single_domain_has_zero_domain_loss(batch):
    x, y, _ = batch
    model = make_model(n_domains=1)
    out = model.forward(x, grl_scale=0.1)
    assert np.array_equal(out.domain_probs.data, np.ones((4, 1)))
    assert total_loss(out.class_probs, y, out.domain_probs, np.zeros(4, int), out.graph_loss).ce_d == 0.0


def test_loss_non_negative_random():
    rng = np.random.default_rng(3)
    for _ in range(20):
        parts = total_loss(softmax(rng.normal(size=(3, 5))), rng.integers(0, 5, 3),
                           softmax(rng.normal(size=(3, 4))), rng.integers(0, 4, 3), rng.random(), mu=0.5)
        assert parts.total.item() >= 0


# -- minimax contract --------------------------------------------------------------------

def grl_free_domain_ce(model, x, d):
    out = model.forward(x)
    probs = label_predictor(out.readout, model.params["head.d.w"], model.params["head.d.b"])
    return T.cross_entropy(probs, one_hot(d, model.config.n_domains))


def test_reversed_gradient_is_negated_plain_gradient(batch):
    x, _, d = batch
    model = make_model()
    names = model.extractor_names()
    reversed_ = grads_of(model, names, lambda: T.cross_entropy(
        model.forward(x, grl_scale=1.0).domain_probs, one_hot(d, 3)))
    plain = grads_of(model, names, lambda: grl_free_domain_ce(model, x, d))
    assert max(np.abs(reversed_[n] + plain[n]).max() for n in names) < 1e-9


def test_zero_beta_blocks_domain_gradient(batch):
    x, _, d = batch
    model = make_model()
    names = model.extractor_names()
    g = grads_of(model, names, lambda: T.cross_entropy(model.forward(x, grl_scale=0.0).domain_probs,
                                                       one_hot(d, 3)))
    assert all(np.array_equal(g[n], np.zeros_like(g[n])) for n in names)


def test_total_gradient_decomposes(batch):
    x, y, d = batch
    model = make_model()
    names = model.extractor_names()
    beta, mu = 0.3, 0.5
    total = grads_of(model, names, lambda: (lambda o: total_loss(o.class_probs, y, o.domain_probs, d,
                                                                 o.graph_loss, mu).total)(
        model.forward(x, grl_scale=beta)))
    ce_y = grads_of(model, names, lambda: T.cross_entropy(model.forward(x).class_probs, one_hot(y, 5)))
    ce_d = grads_of(model, names, lambda: grl_free_domain_ce(model, x, d))
    graph = grads_of(model, names, lambda: model.forward(x).graph_loss)
    worst = max(np.abs(total[n] - (ce_y[n] - beta * ce_d[n] + mu * graph[n])).max() for n in names)
    assert worst < 1e-9


def test_domain_head_descends_domain_loss(batch):
    x, y, d = batch
    model = make_model()

    def ce_d():
        return T.cross_entropy(model.forward(x, grl_scale=0.1).domain_probs, one_hot(d, 3))

    before = ce_d().item()
    with T.Tape() as tape:
        out = model.forward(x, grl_scale=0.1)
        loss = total_loss(out.class_probs, y, out.domain_probs, d, out.graph_loss).total
    tape.backward(loss)
    head = {n: model.params[n].grad.copy() for n in model.group("domain")}
    optimizer_step(model.params, head, OptimizerState(kind="sgd"), 0.05)
    assert ce_d().item() <= before


def test_zero_beta_zero_mu_is_plain_classifier_step(batch):
    x, y, d = batch
    a, b = make_model(seed=5), make_model(seed=5)
    with T.Tape() as tape:
        out = a.forward(x, grl_scale=0.0)
        loss = total_loss(out.class_probs, y, out.domain_probs, d, out.graph_loss, mu=0.0).total
    tape.backward(loss)
    ga = {n: p.grad.copy() for n, p in a.params.items()}
    with T.Tape() as tape:
        loss = T.cross_entropy(b.forward(x).class_probs, one_hot(y, 5))
    tape.backward(loss)
    gb = {n: p.grad.copy() for n, p in b.params.items()}
    optimizer_step(a.params, ga, OptimizerState(kind="sgd"), 0.01)
    optimizer_step(b.params, gb, OptimizerState(kind="sgd"), 0.01)
    for name in a.params:
        if not name.startswith("head.d."):
            assert np.array_equal(a.params[name].data, b.params[name].data), name


# -- linear probe -----------------------------------------------------------------------------

def test_probe_separable_and_chance():
    rng = np.random.default_rng(6)
    y = np.repeat(np.arange(4), 50)
    separable = np.eye(4)[y] * 10 + rng.normal(size=(200, 4)) * 0.1
    assert linear_probe_accuracy(separable, y) == 1.0
    noise = rng.normal(size=(200, 3))
    train, test = np.arange(0, 200, 2), np.arange(1, 200, 2)
    assert linear_probe_accuracy(noise[train], y[train], noise[test], y[test]) < 0.45


def test_probe_constant_feature_column():
    y = np.array([0, 0, 1, 1])
    x = np.array([[1.0, 0.0], [1.0, 0.1], [1.0, 5.0], [1.0, 5.1]])
    assert linear_probe_accuracy(x, y) == 1.0


def test_model_copy_independent():
    model = make_model()
    clone = copy.deepcopy(model)
    clone.params["graph.w"].data += 1.0
    assert not np.array_equal(clone.params["graph.w"].data, model.params["graph.w"].data)
