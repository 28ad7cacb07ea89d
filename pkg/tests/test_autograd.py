"""Backward-pass correctness: analytic cases, finite differences, graph contract."""

import numpy as np
import pytest

from attrface import tensor as T
from attrface.gradcheck import check_gradients
from attrface.tensor import GraphError, Tensor, topo_order

GRAD_TOL = 1e-4


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, dtype="f64", requires_grad=True)


def test_grad_of_sum_is_ones():
    w = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
    T.tsum(w).backward()
    np.testing.assert_array_equal(w.grad, np.ones((2, 3), dtype=np.float32))


def test_grad_of_sum_of_squares():
    w = Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
    T.tsum(T.mul(w, w)).backward()
    np.testing.assert_allclose(w.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    w = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    with pytest.raises(GraphError):
        T.mul(w, w).backward()


def test_repeated_backward_accumulates():
    w = Tensor(np.array([3.0], dtype=np.float32), requires_grad=True)
    loss = T.tsum(w)
    loss.backward()
    loss.backward()
    np.testing.assert_allclose(w.grad, [2.0])


def test_topo_order_parents_first_and_unique():
    rng = np.random.default_rng(0)
    a = leaf(rng, 3, 3)
    b = leaf(rng, 3, 3)
    c = T.mul(a, b)
    d = T.add(c, a)  # diamond: a feeds two nodes
    loss = T.tsum(T.relu(d))
    order = topo_order(loss)
    assert len(order) == len({id(n) for n in order})
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]


def test_no_grad_stops_recording():
    w = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with T.no_grad():
        out = T.mul(w, w)
    assert out._backward is None and not out.requires_grad


class TestFiniteDifferences:
    """Each differentiable op checked against central differences in f64."""

    def test_conv2d(self):
        rng = np.random.default_rng(1)
        x = leaf(rng, 2, 3, 5, 5)
        w = leaf(rng, 4, 3, 3, 3)
        b = leaf(rng, 4)
        errs = check_gradients(
            lambda: T.tsum(T.mul(T.conv2d(x, w, b, stride=2, padding=1),
                                 T.conv2d(x, w, b, stride=2, padding=1))),
            {"x": x, "w": w, "b": b})
        assert max(errs.values()) <= GRAD_TOL, errs

    def test_pointwise_conv(self):
        rng = np.random.default_rng(2)
        x = leaf(rng, 2, 4, 3, 3)
        w = leaf(rng, 3, 4, 1, 1)
        b = leaf(rng, 3)
        errs = check_gradients(lambda: T.tsum(T.mul(T.pointwise_conv(x, w, b),
                                                    T.pointwise_conv(x, w, b))),
                               {"x": x, "w": w, "b": b})
        assert max(errs.values()) <= GRAD_TOL, errs

    def test_gap_gmp(self):
        rng = np.random.default_rng(3)
        x = leaf(rng, 2, 3, 4, 4)
        errs = check_gradients(lambda: T.tsum(T.mul(T.gap_spatial(x), T.gmp_spatial(x))),
                               {"x": x})
        assert max(errs.values()) <= GRAD_TOL, errs

    def test_channel_mean_max(self):
        rng = np.random.default_rng(4)
        x = leaf(rng, 2, 5, 3, 3)
        errs = check_gradients(lambda: T.tsum(T.mul(T.channel_mean_max(x),
                                                    T.channel_mean_max(x))),
                               {"x": x})
        assert max(errs.values()) <= GRAD_TOL, errs

    def test_broadcast_add_mul(self):
        rng = np.random.default_rng(5)
        a = leaf(rng, 2, 3, 4, 4)
        b = leaf(rng, 1, 3, 1, 1)
        errs = check_gradients(lambda: T.tsum(T.mul(T.broadcast_add(a, b),
                                                    T.mul(a, b))),
                               {"a": a, "b": b})
        assert max(errs.values()) <= GRAD_TOL, errs

    def test_sigmoid_relu(self):
        rng = np.random.default_rng(6)
        # keep relu inputs away from the kink so central differences are valid
        x = Tensor(rng.uniform(0.2, 1.5, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4)),
                   dtype="f64", requires_grad=True)
        errs = check_gradients(lambda: T.tsum(T.mul(T.sigmoid(x), T.relu(x))), {"x": x})
        assert max(errs.values()) <= GRAD_TOL, errs

    def test_concat_linear(self):
        rng = np.random.default_rng(7)
        a = leaf(rng, 2, 2, 3, 3)
        b = leaf(rng, 2, 3, 3, 3)
        w = leaf(rng, 5, 4)
        bb = leaf(rng, 4)
        def fn():
            cat = T.concat_channels(a, b)
            flat = T.reshape(T.gap_spatial(cat), (2, 5))
            return T.tmean(T.mul(T.linear(flat, w, bb), T.linear(flat, w, bb)))
        errs = check_gradients(fn, {"a": a, "b": b, "w": w, "bb": bb})
        assert max(errs.values()) <= GRAD_TOL, errs

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(8)
        logits = leaf(rng, 4, 6)
        targets = np.array([0, 2, 5, 3])
        errs = check_gradients(lambda: T.softmax_cross_entropy(logits, targets),
                               {"logits": logits})
        assert max(errs.values()) <= GRAD_TOL, errs

    def test_softmax(self):
        rng = np.random.default_rng(9)
        x = leaf(rng, 3, 5)
        w = leaf(rng, 3, 5)
        errs = check_gradients(lambda: T.tsum(T.mul(T.softmax(x), w)), {"x": x, "w": w})
        assert max(errs.values()) <= GRAD_TOL, errs

    def test_bce(self):
        rng = np.random.default_rng(10)
        # strictly inside the clamp interval so it is differentiable
        p = Tensor(rng.uniform(0.1, 0.9, size=(4, 3)), dtype="f64", requires_grad=True)
        t = rng.integers(0, 2, size=(4, 3)).astype(np.float64)
        errs = check_gradients(lambda: T.tmean(T.bce(p, t)), {"p": p})
        assert max(errs.values()) <= GRAD_TOL, errs

    def test_random_composite_graphs(self):
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            x = leaf(rng, 2, 3, 4, 4)
            w = leaf(rng, 3, 3, 3, 3)
            b = leaf(rng, 3)
            g = leaf(rng, 1, 3, 1, 1)

            def fn():
                h = T.conv2d(x, w, b, stride=1, padding=1)
                h = T.sigmoid(T.broadcast_add(h, g))
                pooled = T.gap_spatial(T.mul(h, x))
                return T.tsum(T.mul(pooled, pooled))

            errs = check_gradients(fn, {"x": x, "w": w, "b": b, "g": g})
            assert max(errs.values()) <= GRAD_TOL, (seed, errs)
