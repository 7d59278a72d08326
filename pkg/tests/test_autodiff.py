import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import fd_grad, rel_err
from metakoopman.autodiff import Graph, ShapeError
from metakoopman.linalg import pinv

seeds = st.integers(0, 2**32 - 1)


def check_op(build, shapes, seed, positive=False, tol=1e-4):
    """Autodiff vs central differences for loss = sum(w * build(g, *leaves))."""
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=s) for s in shapes]
    if positive:
        xs = [np.abs(x) + 0.5 for x in xs]

    def loss_of(vals):
        g = Graph()
        leaves = [g.param(f"x{i}", v) for i, v in enumerate(vals)]
        out = build(g, *leaves)
        w = np.random.default_rng(seed + 1).normal(size=g.shape(out))
        return g, leaves, g.sum(g.mul(out, g.constant(w)))

    g, leaves, loss = loss_of(xs)
    grads = g.param_grads(loss)
    for i, x in enumerate(xs):
        def f(v, i=i):
            vals = list(xs)
            vals[i] = v
            g2, _, l2 = loss_of(vals)
            return float(g2.value(l2))
        assert rel_err(grads[f"x{i}"], fd_grad(f, x)) < tol


CASES = {
    "matmul": (lambda g, a, b: g.matmul(a, b), [(3, 4), (4, 2)]),
    "matmul_batched": (lambda g, a, b: g.matmul(a, b), [(2, 3, 4), (2, 4, 2)]),
    "add": (lambda g, a, b: g.add(a, b), [(3, 4), (3, 4)]),
    "add_broadcast": (lambda g, a, b: g.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda g, a, b: g.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda g, a, b: g.mul(a, b), [(3, 4), (3, 4)]),
    "scale": (lambda g, a: g.scale(a, -1.7), [(5,)]),
    "sigmoid": (lambda g, a: g.sigmoid(a), [(3, 4)]),
    "tanh": (lambda g, a: g.tanh(a), [(3, 4)]),
    "mean0": (lambda g, a: g.mean(a, 0), [(3, 4)]),
    "mean1": (lambda g, a: g.mean(a, -1), [(2, 3, 4)]),
    "concat": (lambda g, a, b: g.concat([a, b]), [(3, 2), (3, 4)]),
    "stack": (lambda g, a, b: g.stack([a, b], 1), [(3, 2), (3, 2)]),
    "slice": (lambda g, a: g.slice(a, 1, 1, 3), [(3, 4)]),
    "take": (lambda g, a: g.take(a, 0, 2), [(3, 4)]),
    "reshape": (lambda g, a: g.reshape(a, (2, 6)), [(3, 4)]),
    "transpose": (lambda g, a: g.transpose(a), [(2, 3, 4)]),
    "broadcast_to": (lambda g, a: g.broadcast_to(a, (3, 2, 4)), [(2, 4)]),
    "inv": (lambda g, a: g.inv(g.add(a, g.constant(4 * np.eye(3)))), [(3, 3)]),
    "sq_error": (lambda g, a, b: g.sq_error(a, b), [(3, 4), (3, 4)]),
    "pinv_wide": (lambda g, a: pinv(g, a), [(2, 5)]),
    "pinv_tall": (lambda g, a: pinv(g, a), [(5, 2)]),
    "pinv_batched": (lambda g, a: pinv(g, a), [(3, 2, 6)]),
}


@pytest.mark.parametrize("name", sorted(CASES))
@settings(max_examples=100, deadline=None)
@given(seed=seeds)
def test_op_gradient_matches_finite_differences(name, seed):
    build, shapes = CASES[name]
    check_op(build, shapes, seed)


@settings(max_examples=100, deadline=None)
@given(seed=seeds)
def test_relu_gradient_away_from_kink(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 3))
    x = np.where(np.abs(x) < 1e-3, 0.5, x)
    g = Graph()
    a = g.param("x", x)
    w = rng.normal(size=x.shape)
    grad = g.param_grads(g.sum(g.mul(g.relu(a), g.constant(w))))["x"]
    assert np.allclose(grad, w * (x > 0))


@settings(max_examples=100, deadline=None)
@given(seed=seeds)
def test_dropout_gradient_replays_mask(seed):
    g = Graph(training=True, rng=np.random.default_rng(seed))
    x = g.param("x", np.ones((5, 6)))
    d = g.dropout(x, 0.3)
    grad = g.param_grads(g.sum(d))["x"]
    mask = g.nodes[d].extra
    assert np.array_equal(grad, mask)
    assert set(np.unique(mask)) <= {0.0, 1 / 0.7}


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 5))
    g = Graph()
    assert np.array_equal(g.value(g.matmul(g.constant(np.eye(3)), g.constant(a))), a)


def test_relu_definition():
    g = Graph()
    assert g.value(g.relu(g.constant([-1.0, 0.0, 2.0]))).tolist() == [0.0, 0.0, 2.0]


def test_mse_gradient_closed_form(rng):
    p, y = rng.normal(size=7), rng.normal(size=7)
    g = Graph()
    a = g.param("p", p)
    grad = g.param_grads(g.sq_error(a, g.constant(y)))["p"]
    assert rel_err(grad, 2 * (p - y) / 7) < 1e-12

    def f(v):
        return float(np.mean((v - y) ** 2))
    assert rel_err(grad, fd_grad(f, p)) < 1e-6


def test_sum_gradient_is_ones():
    g = Graph()
    x = g.param("x", np.array([0.3, -2.0, 5.0]))
    assert g.param_grads(g.sum(x))["x"].tolist() == [1.0, 1.0, 1.0]


def test_quadratic_form_gradient(rng):
    a, x = rng.normal(size=(4, 3)), rng.normal(size=(3, 1))
    g = Graph()
    xn = g.param("x", x)
    ax = g.matmul(g.constant(a), xn)
    grad = g.param_grads(g.sum(g.mul(ax, ax)))["x"]
    assert np.allclose(grad, 2 * a.T @ a @ x, rtol=1e-12, atol=1e-12)


def test_unreached_param_has_zero_gradient():
    g = Graph()
    x = g.param("x", np.ones(3))
    g.param("unused", np.ones((2, 2)))
    grads = g.param_grads(g.sum(x))
    assert np.array_equal(grads["unused"], np.zeros((2, 2)))


def test_non_scalar_loss_rejected():
    g = Graph()
    x = g.param("x", np.ones(3))
    with pytest.raises(ShapeError):
        g.backward(x)


def test_shape_mismatch_names_both_shapes():
    g = Graph()
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        g.matmul(g.constant(np.ones((2, 3))), g.constant(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="sq_error"):
        g.sq_error(g.constant(np.ones(3)), g.constant(np.ones(4)))


def test_nonfinite_value_raises():
    g = Graph()
    with pytest.raises(FloatingPointError):
        g.constant([np.nan])


def test_graph_is_append_only_and_acyclic(rng):
    g = Graph()
    a = g.param("a", rng.normal(size=(2, 2)))
    b = g.tanh(g.matmul(a, a))
    g.sum(g.concat([a, b]))
    for i, node in enumerate(g.nodes):
        assert all(j < i for j in node.inputs)


def test_param_dedup_by_name():
    g = Graph()
    assert g.param("w", np.ones(2)) == g.param("w", np.zeros(2))


def test_dropout_identity_in_eval_mode():
    g = Graph(training=False)
    x = g.constant(np.ones(4))
    assert g.dropout(x, 0.5) == x


def test_dropout_deterministic_given_seed():
    def run():
        g = Graph(training=True, rng=np.random.default_rng(5))
        return g.value(g.dropout(g.constant(np.ones((8, 8))), 0.1))
    assert np.array_equal(run(), run())
