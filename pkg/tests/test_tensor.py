"""Autodiff kernels: closed-form values, finite-difference gradients, error paths."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pandalab import tensor as T
from pandalab.tensor import Tensor, grad_check


finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


class TestSoftmax:
    def test_symmetric_pair(self):
        out = T.softmax(Tensor([[0.0, 0.0]])).data
        np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-15)

    def test_ln2(self):
        out = T.softmax(Tensor([[math.log(2.0), 0.0]])).data
        np.testing.assert_allclose(out, [[2 / 3, 1 / 3]], atol=1e-15)

    def test_saturation_is_stable(self):
        out = T.softmax(Tensor([[1000.0, 0.0]])).data
        assert abs(out[0, 0] - 1.0) < 1e-12 and abs(out[0, 1]) < 1e-12

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(ValueError, match="invalid logits"):
            T.softmax(Tensor([[bad, 0.0]]))

    @given(arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)))
    def test_rows_sum_to_one(self, z):
        p = T.softmax(Tensor(z)).data
        assert np.all(p >= 0) and np.all(p <= 1)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)


class TestCrossEntropy:
    def test_perfect_prediction(self):
        assert T.cross_entropy(Tensor([[1.0, 0.0]]), [0], from_logits=False).item() == 0.0

    def test_uniform_two_classes(self):
        assert abs(T.cross_entropy(Tensor([[0.0, 0.0]]), [1]).item() - 0.693147) < 1e-6

    def test_quarter_probability(self):
        p = Tensor([[0.25, 0.75]])
        assert abs(T.cross_entropy(p, [0], from_logits=False).item() - 1.386294) < 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            T.cross_entropy(Tensor([[0.0, 0.0]]), [2])

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            T.cross_entropy(Tensor(np.zeros((0, 2))), [])

    @given(arrays(np.float64, (4, 3), elements=finite), st.lists(st.integers(0, 2), min_size=4, max_size=4))
    def test_non_negative(self, z, y):
        assert T.cross_entropy(Tensor(z), y).item() >= 0.0


class TestGradCheck:
    def test_sum(self):
        res = grad_check(lambda x: T.tsum(x), np.random.default_rng(0).normal(size=(3, 4)))
        assert res.max_rel_error < 1e-10

    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        T.tsum(T.square(x)).backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])
        assert grad_check(lambda v: T.tsum(T.square(v)), [1.0, 2.0, 3.0]).max_rel_error < 1e-6

    def test_non_finite_probe_raises(self):
        with pytest.raises(ValueError):
            grad_check(lambda v: T.tsum(T.log(v)), [1e-6, 1.0], eps=1e-5)

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            grad_check(lambda v: T.tsum(v), [1.0], eps=0.0)

    def test_detects_wrong_gradient(self):
        def broken(x):
            out = T.tsum(T.square(x))
            out._backward = lambda g: (np.zeros_like(x.data),)
            return out
        assert grad_check(broken, [1.0, 2.0]).max_rel_error > 0.5


def _rng_points(shape, n=10, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=shape) for _ in range(n)]


W = np.random.default_rng(42).normal(size=(4, 3))
G = np.random.default_rng(43).normal(size=(2, 3))

# each function maps a [2 x 4] point to a scalar through one kernel
KERNELS = {
    "matmul": lambda x: T.tsum(T.square(T.matmul(x, Tensor(W)))),
    "matmul_rhs": lambda x: T.tsum(T.square(T.matmul(Tensor(G.T), x))),
    "add_broadcast": lambda x: T.tsum(T.square(x + Tensor(np.arange(4.0)))),
    "mul": lambda x: T.tsum(x * x * Tensor(np.arange(1.0, 5.0))),
    "div": lambda x: T.tsum(Tensor(np.ones(4)) / (T.square(x) + 1.0)),
    "exp": lambda x: T.tsum(T.exp(x * 0.3)),
    "gelu": lambda x: T.tsum(T.gelu(x) * Tensor(np.arange(8.0).reshape(2, 4))),
    "layer_norm": lambda x: T.tsum(T.layer_norm(x, Tensor(np.arange(1.0, 5.0)), Tensor(np.ones(4)))
                                   * Tensor(np.arange(8.0).reshape(2, 4))),
    "mean": lambda x: T.tsum(T.square(T.mean(x, axis=0))),
    "concat": lambda x: T.tsum(T.square(T.concat([x, x * 2.0], axis=1)) * Tensor(np.arange(16.0).reshape(2, 8))),
    "softmax": lambda x: T.tsum(T.softmax(x) * Tensor(np.arange(8.0).reshape(2, 4))),
    "log_softmax": lambda x: T.tsum(T.log_softmax(x) * Tensor(np.arange(8.0).reshape(2, 4))),
    "cross_entropy": lambda x: T.cross_entropy(x, [1, 3]),
    "select": lambda x: T.tsum(T.square(x[:, 1:3])),
    "transpose": lambda x: T.tsum(T.square(T.matmul(T.transpose(x), Tensor(G)))),
}


@pytest.mark.parametrize("name", sorted(KERNELS))
def test_kernel_gradients_at_random_points(name):
    f = KERNELS[name]
    for x in _rng_points((2, 4)):
        assert grad_check(f, x).max_rel_error < 1e-4, name


def test_embedding_gradient_accumulates_repeats():
    table = Tensor(np.zeros((5, 2)), requires_grad=True)
    T.tsum(T.embedding(table, np.array([[1, 1, 3]]))).backward()
    np.testing.assert_array_equal(table.grad[:, 0], [0, 2, 0, 1, 0])


class TestKernels:
    def test_identity_matmul(self):
        a = np.random.default_rng(1).normal(size=(3, 3))
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)

    def test_gelu_zero(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    def test_layer_norm_constant_row(self):
        out = T.layer_norm(Tensor(np.full((1, 6), 3.5)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 6)))

    def test_layer_norm_normalizes(self):
        out = T.layer_norm(Tensor(np.random.default_rng(2).normal(size=(4, 16)) * 5 + 2)).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-3)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ValueError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


class TestGraph:
    def test_backward_is_deterministic(self):
        x0 = np.random.default_rng(3).normal(size=(2, 4))
        grads = []
        for _ in range(2):
            x = Tensor(x0, requires_grad=True)
            KERNELS["layer_norm"](x).backward()
            grads.append(x.grad.copy())
        assert np.array_equal(grads[0], grads[1])

    def test_every_reachable_leaf_gets_grad(self):
        a, b = Tensor([1.0, 2.0], requires_grad=True), Tensor([3.0, 4.0], requires_grad=True)
        c = Tensor([5.0, 6.0])
        T.tsum(a * b + c).backward()
        assert a.grad.shape == a.shape and b.grad.shape == b.shape
        assert c.grad is None

    def test_no_grad_builds_no_graph(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_grad_shape_matches_broadcast_operand(self):
        x = Tensor(np.ones((3, 4)), requires_grad=True)
        bias = Tensor(np.ones(4), requires_grad=True)
        T.tsum(x + bias).backward()
        assert bias.grad.shape == (4,)
        np.testing.assert_array_equal(bias.grad, np.full(4, 3.0))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-3, 3)))
def test_gelu_gradient_property(x):
    assert grad_check(lambda v: T.tsum(T.gelu(v)), x).max_rel_error < 1e-4
