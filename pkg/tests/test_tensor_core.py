import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from anytimenet.errors import GraphStateError, InputError, ShapeError
from anytimenet.graph import Graph, finite_diff_check
from anytimenet.tensor import matmul, relu, softmax_xent

floats = st.floats(-10, 10, allow_nan=False)


def test_matmul_identity():
    b = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(matmul(np.eye(3), b), b)


def test_matmul_small():
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])


def test_matmul_zeros():
    out = matmul(np.zeros((2, 3)), np.random.default_rng(0).normal(size=(3, 4)))
    assert out.shape == (2, 4) and not out.any()


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        matmul(np.zeros(3), np.zeros((3, 1)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.data())
def test_matmul_matches_dot_products(m, k, n, data):
    a = data.draw(arrays(np.float64, (m, k), elements=floats))
    b = data.draw(arrays(np.float64, (k, n), elements=floats))
    out = matmul(a, b)
    for i in range(m):
        for j in range(n):
            assert math.isclose(out[i, j], math.fsum(a[i, p] * b[p, j] for p in range(k)),
                                rel_tol=1e-12, abs_tol=1e-9)


def test_relu_examples():
    assert np.array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    assert not relu(-np.ones(5)).any()
    x = np.array([0.5, 3.0])
    assert np.array_equal(relu(x), x)


def test_xent_uniform():
    loss, _ = softmax_xent(np.zeros((4, 10)), np.array([0, 3, 9, 5]))
    assert loss == pytest.approx(math.log(10), abs=1e-12)


def test_xent_saturated():
    logits = np.zeros((1, 3))
    logits[0, 1] = 1000.0
    loss, _ = softmax_xent(logits, np.array([1]))
    assert 0.0 <= loss < 1e-12


def test_xent_closed_form():
    # -log(e^a / (e + e^2)) for a = 1, 2
    loss0, _ = softmax_xent(np.array([[1.0, 2.0]]), np.array([0]))
    loss1, _ = softmax_xent(np.array([[1.0, 2.0]]), np.array([1]))
    assert loss0 == pytest.approx(math.log(1 + math.e), abs=1e-14)
    assert loss1 == pytest.approx(math.log(1 + math.e) - 1, abs=1e-14)


def test_xent_bad_label():
    with pytest.raises(InputError):
        softmax_xent(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(InputError):
        softmax_xent(np.zeros((2, 3)), np.array([-1, 0]))


def test_sum_gradient_is_ones():
    g = Graph(5)
    w = g.param(np.arange(5), (5,))
    loss = g.sum(w)
    g.forward(np.random.default_rng(1).normal(size=5))
    assert np.array_equal(g.backward(loss), np.ones(5))


def test_affine_quadratic_closed_form():
    rng = np.random.default_rng(2)
    x, t = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    W, b = rng.normal(size=(3, 2)), rng.normal(size=2)
    theta = np.concatenate([W.ravel(), b])
    g = Graph(8)
    xin = g.input("x")
    out = g.affine(xin, np.arange(6), np.arange(6), (3, 2), np.arange(6, 8))
    loss = g.half_sq_error(out, g.input("t"))
    g.forward(theta, x=x, t=t)
    grad = g.backward(loss)
    r = (x @ W + b - t) / len(x)
    assert np.allclose(grad[:6], (x.T @ r).ravel(), atol=1e-12)
    assert np.allclose(grad[6:], r.sum(axis=0), atol=1e-12)


def test_unreachable_param_zero():
    g = Graph(6)
    a = g.param(np.arange(3), (3,))
    g.param(np.arange(3, 6), (3,))
    loss = g.sum(a)
    g.forward(np.ones(6))
    grad = g.backward(loss)
    assert np.array_equal(grad[3:], np.zeros(3))


def test_backward_before_forward():
    g = Graph(2)
    loss = g.sum(g.param(np.arange(2), (2,)))
    with pytest.raises(GraphStateError):
        g.backward(loss)


def _mlp_graph(rng, dims):
    sizes = [a * b + b for a, b in zip(dims, dims[1:])]
    g = Graph(sum(sizes))
    h = g.input("x")
    off = 0
    for li, (a, b) in enumerate(zip(dims, dims[1:])):
        w_idx = np.arange(off, off + a * b)
        h = g.affine(h, w_idx, np.arange(a * b), (a, b), np.arange(off + a * b, off + a * b + b))
        off += a * b + b
        if li < len(dims) - 2:
            h = g.relu(h)
    return g, h


def test_fd_linear_model():
    rng = np.random.default_rng(3)
    g = Graph(8)
    xin = g.input("x")
    loss = g.half_sq_error(g.affine(xin, np.arange(6), np.arange(6), (3, 2), np.arange(6, 8)),
                           g.input("t"))
    feeds = {"x": rng.normal(size=(4, 3)), "t": rng.normal(size=(4, 2))}
    err = finite_diff_check(g, loss, rng.normal(size=8), feeds)
    assert err <= 1e-8


def test_fd_three_layer_mlp():
    rng = np.random.default_rng(4)
    g, logits = _mlp_graph(rng, [3, 5, 4, 3])
    y = g.labels("y")
    loss = g.softmax_xent(logits, y)
    x, labels = rng.normal(size=(6, 3)), rng.integers(0, 3, 6)
    for _ in range(100):
        theta = rng.normal(0, 0.7, g.num_params)
        g.forward(theta, x=x, y=labels)
        if g.relu_margin() > 1e-4:
            break
    assert finite_diff_check(g, loss, theta, {"x": x, "y": labels}) <= 1e-4


def test_fd_constant_loss():
    g = Graph(3)
    g.param(np.arange(3), (3,))
    z = g.input("z")
    loss = g.sum(z)
    assert finite_diff_check(g, loss, np.ones(3), {"z": np.ones(2)}) == 0.0


def test_forward_backward_deterministic():
    rng = np.random.default_rng(5)
    g, logits = _mlp_graph(rng, [2, 8, 3])
    loss = g.softmax_xent(logits, g.labels("y"))
    theta, x, y = rng.normal(size=g.num_params), rng.normal(size=(16, 2)), rng.integers(0, 3, 16)
    outs = []
    for _ in range(2):
        g.forward(theta, x=x, y=y)
        outs.append(g.backward(loss))
    assert np.array_equal(outs[0], outs[1])
