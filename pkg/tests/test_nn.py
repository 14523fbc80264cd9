import numpy as np
import pytest

from conftest import random_graph
from graphbackdoor import nn
from graphbackdoor.graph import mean_aggregator, normalized_adjacency


def dense_gcn(params, A, X):
    return A @ np.maximum(A @ X @ params["W1"], 0) @ params["W2"]


def test_gcn_forward_matches_dense(rng):
    g = random_graph(rng, 10)
    p = nn.init_gcn(rng, 4, 5, 3)
    A = normalized_adjacency(g)
    np.testing.assert_allclose(nn.gcn_forward(p, A, g.features),
                               dense_gcn(p, A.toarray(), g.features), atol=1e-12)


def test_gcn_shape_error(rng):
    g = random_graph(rng, 5)
    with pytest.raises(ValueError):
        nn.gcn_forward(nn.init_gcn(rng, 7, 4, 2), normalized_adjacency(g), g.features)


def test_ce_uniform_logits_is_log_c():
    loss, _ = nn.ce_loss_and_grad(np.zeros((4, 5)), np.array([0, 1, 2, 3]), np.arange(4))
    assert abs(loss - np.log(5)) < 1e-12


def test_ce_empty_mask():
    with pytest.raises(ValueError):
        nn.ce_loss_and_grad(np.zeros((2, 2)), np.zeros(2, int), [])


@pytest.mark.parametrize("arch", ["gcn", "sage", "mlp"])
def test_backward_matches_finite_differences(rng, arch):
    g = random_graph(rng, 8)
    X = g.features.copy()
    mask = np.array([0, 2, 3, 6])
    if arch == "gcn":
        p = nn.init_gcn(rng, 4, 5, 3)
        A = normalized_adjacency(g)
        fwd = lambda: nn.gcn_forward(p, A, X)
        out, tape = nn.gcn_forward(p, A, X, record=True)
        grads = nn.gcn_backward(p, tape, nn.ce_loss_and_grad(out, g.labels, mask)[1])
    elif arch == "sage":
        p = nn.init_sage(rng, 4, 5, 3)
        p["b1"] = rng.normal(size=5)
        M = mean_aggregator(g)
        fwd = lambda: nn.sage_forward(p, M, X)
        out, tape = nn.sage_forward(p, M, X, record=True)
        grads = nn.sage_backward(p, tape, nn.ce_loss_and_grad(out, g.labels, mask)[1])
    else:
        p = nn.init_mlp(rng, 4, 6, 3)
        p["b1"] = rng.normal(size=6) * 0.1
        p["b2"] = rng.normal(size=3) * 0.1
        fwd = lambda: nn.mlp_forward(p, X)
        out, tape = nn.mlp_forward(p, X, record=True)
        grads, _ = nn.mlp_backward(p, tape, nn.ce_loss_and_grad(out, g.labels, mask)[1])
    f = lambda: nn.ce_loss_and_grad(fwd(), g.labels, mask)[0]
    for k in grads:
        num = nn.numerical_gradient(f, p[k], 1e-6)
        assert nn.relative_error(grads[k], num) < 1e-6, k


def test_gcn_feature_row_gradients(rng):
    g = random_graph(rng, 7)
    X = g.features.copy()
    p = nn.init_gcn(rng, 4, 5, 3)
    A = normalized_adjacency(g)
    rows = [1, 4]
    out, tape = nn.gcn_forward(p, A, X, record=True, grad_rows=rows)
    _, dout = nn.ce_loss_and_grad(out, g.labels, np.arange(7))
    gX = nn.gcn_backward(p, tape, dout, grad_rows=rows)["X"]
    num = nn.numerical_gradient(lambda: nn.ce_loss_and_grad(nn.gcn_forward(p, A, X),
                                                            g.labels, np.arange(7))[0], X, 1e-6)
    assert nn.relative_error(gX, num[rows]) < 1e-6


def test_backward_without_tape_rows_raises(rng):
    g = random_graph(rng, 5)
    p = nn.init_gcn(rng, 4, 3, 2)
    out, tape = nn.gcn_forward(p, normalized_adjacency(g), g.features, record=True)
    with pytest.raises(nn.TapeError):
        nn.gcn_backward(p, tape, np.ones_like(out), grad_rows=[0])
    with pytest.raises(nn.TapeError):
        nn.gcn_backward(p, None, np.ones_like(out))


def test_sgd_step_cases(rng):
    p = {"w": np.ones(3)}
    g = {"w": np.array([1.0, 2.0, 3.0])}
    np.testing.assert_array_equal(nn.sgd_step(p, g, 0.0)["w"], p["w"])
    np.testing.assert_allclose(nn.sgd_step(p, g, 0.5)["w"], [0.5, 0.0, -0.5])
    with pytest.raises(nn.DivergenceError):
        nn.sgd_step(p, {"w": np.array([np.inf, 0, 0])}, 0.1)


def test_sparse_operand_matches_dense(rng):
    g = random_graph(rng, 9)
    X = (rng.random((9, 40)) < 0.05).astype(float)
    p = nn.init_gcn(rng, 40, 4, 3)
    A = normalized_adjacency(g)
    Xs = nn.feature_operand(X)
    assert not isinstance(Xs, np.ndarray)
    o1, t1 = nn.gcn_forward(p, A, X, record=True)
    o2, t2 = nn.gcn_forward(p, A, Xs, record=True)
    np.testing.assert_allclose(o1, o2, atol=1e-12)
    g1 = nn.gcn_backward(p, t1, np.ones_like(o1))
    g2 = nn.gcn_backward(p, t2, np.ones_like(o2))
    np.testing.assert_allclose(g1["W1"], g2["W1"], atol=1e-12)


def test_adam_decreases_loss(rng):
    g = random_graph(rng, 12)
    p = nn.init_gcn(rng, 4, 8, 3)
    A = normalized_adjacency(g)
    opt = nn.Adam(0.05)
    losses = []
    for _ in range(30):
        out, tape = nn.gcn_forward(p, A, g.features, record=True)
        loss, d = nn.ce_loss_and_grad(out, g.labels, np.arange(12))
        losses.append(loss)
        p = opt.step(p, nn.gcn_backward(p, tape, d))
    assert losses[-1] < losses[0]


def test_one_node_identity_composition():
    x = np.array([[0.5, 2.0, 0.0]])
    p = {"W1": np.eye(3), "W2": np.eye(3)}
    A = normalized_adjacency(AttributedGraphOne(x))
    np.testing.assert_allclose(nn.gcn_forward(p, A, x), x)


def AttributedGraphOne(x):
    from graphbackdoor.graph import AttributedGraph
    return AttributedGraph.from_edges(1, [], x, [0], 3)


def test_zero_weights_give_ln_c():
    g = AttributedGraphOne(np.ones((1, 3)))
    p = {"W1": np.zeros((3, 4)), "W2": np.zeros((4, 3))}
    out = nn.gcn_forward(p, normalized_adjacency(g), g.features)
    assert abs(nn.ce_loss_and_grad(out, g.labels, [0])[0] - np.log(3)) < 1e-12


def test_saturated_logit_loss_near_zero():
    loss, _ = nn.ce_loss_and_grad(np.array([[50.0, 0.0, 0.0]]), np.array([0]), [0])
    assert loss < 1e-20


def test_softmax_rows_sum_to_one(rng):
    np.testing.assert_allclose(nn.softmax(rng.normal(size=(20, 7)) * 30).sum(axis=1), 1.0,
                               atol=1e-9)


def test_ce_grad_matches_finite_differences(rng):
    Z = rng.normal(size=(5, 4))
    y = rng.integers(0, 4, size=5)
    mask = [0, 3, 4]
    _, d = nn.ce_loss_and_grad(Z, y, mask)
    num = nn.numerical_gradient(lambda: nn.ce_loss_and_grad(Z, y, mask)[0], Z, 1e-6)
    assert nn.relative_error(d, num) < 1e-5
    assert np.all(d[[1, 2]] == 0)


def test_zero_upstream_gives_zero_grads(rng):
    g = random_graph(rng, 6)
    p = nn.init_gcn(rng, 4, 5, 3)
    out, tape = nn.gcn_forward(p, normalized_adjacency(g), g.features, record=True)
    for v in nn.gcn_backward(p, tape, np.zeros_like(out)).values():
        assert not v.any()


def test_w2_grad_closed_form_one_node(rng):
    x = rng.normal(size=(1, 3))
    p = {"W1": rng.normal(size=(3, 4)), "W2": rng.normal(size=(4, 2))}
    g = AttributedGraphOne(x)
    out, tape = nn.gcn_forward(p, normalized_adjacency(g), x, record=True)
    up = rng.normal(size=out.shape)
    np.testing.assert_allclose(nn.gcn_backward(p, tape, up)["W2"],
                               np.maximum(x @ p["W1"], 0).T @ up, atol=1e-12)


def test_sgd_arithmetic_and_quadratic():
    p = {"w": np.array(1.0)}
    assert abs(float(nn.sgd_step(p, {"w": np.array(0.5)}, 0.1)["w"]) - 0.95) < 1e-15
    for _ in range(5):
        p = nn.sgd_step(p, {"w": p["w"]}, 0.1)
    assert abs(float(p["w"]) - 0.59049) < 1e-12


def test_init_is_seeded():
    a = nn.init_gcn(np.random.default_rng(3), 4, 5, 2)
    b = nn.init_gcn(np.random.default_rng(3), 4, 5, 2)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
        bound = 1 / np.sqrt(a[k].shape[0])
        assert np.all(np.abs(a[k]) <= bound)
