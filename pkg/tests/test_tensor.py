import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ewavit import tensor as T
from ewavit.tensor import Tensor, backward, grad_check


def test_matmul_2x2_by_hand():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal((a @ b).data, [[19.0, 22.0], [43.0, 50.0]])


def test_softmax_of_zero_and_ln2():
    out = T.softmax(Tensor([0.0, math.log(2.0)]))
    np.testing.assert_allclose(out.data, [1 / 3, 2 / 3], atol=1e-15)


def test_layer_norm_0_2_4():
    x = Tensor([0.0, 2.0, 4.0])
    out = T.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)
    s = math.sqrt(8 / 3)
    np.testing.assert_allclose(out.data, [-2 / s, 0.0, 2 / s], atol=1e-15)


def test_gelu_reference_values():
    out = T.gelu(Tensor([0.0, 1.0, -1.0]))
    # x * Phi(x) with Phi(1) = 0.8413447460685429
    np.testing.assert_allclose(out.data, [0.0, 0.8413447460685429, -0.15865525393145707], atol=1e-15)


def test_broadcast_add_gradient_sums_over_batch():
    x = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)
    backward((x + b).sum())
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_shared_subexpression_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    backward((y + y).sum())
    np.testing.assert_allclose(x.grad, [8.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2.0)


def test_non_finite_values_raise():
    with pytest.raises(FloatingPointError):
        Tensor([1.0]) * np.inf


def test_take_and_scatter_roundtrip():
    x = Tensor(np.arange(12.0).reshape(6, 2), requires_grad=True)
    idx = [np.array([4, 0]), np.array([1, 5, 2, 3])]
    y = T.scatter_rows([T.take_rows(x, i) for i in idx], idx, 6)
    np.testing.assert_array_equal(y.data, x.data)
    backward((y * y).sum())
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_soft_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((2, 4)))
    targets = np.eye(4)[[0, 3]]
    assert T.soft_cross_entropy(logits, targets).item() == pytest.approx(math.log(4), abs=1e-15)


OPS = {
    "gelu": lambda x: T.gelu(x).sum(),
    "softmax": lambda x: (T.softmax(x, axis=-1) * np.arange(x.shape[-1])).sum(),
    "layer_norm": lambda x: (T.layer_norm(x, Tensor(np.linspace(0.5, 1.5, x.shape[-1])),
                                          Tensor(np.zeros(x.shape[-1]))) * np.arange(x.shape[-1])).sum(),
    "matmul": lambda x: (x @ Tensor(np.linspace(-1, 1, x.shape[-1] * 2).reshape(x.shape[-1], 2))).sum(),
    "transpose": lambda x: (x.transpose(1, 0) * np.arange(x.size).reshape(x.shape[::-1])).sum(),
    "cross_entropy": lambda x: T.soft_cross_entropy(x, np.full(x.shape, 1.0 / x.shape[-1])),
    "mean": lambda x: (x.mean(axis=0) * np.arange(x.shape[-1])).sum(),
    "getitem": lambda x: (x[1:, :2] * 3.0).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_central_differences(name):
    rng = np.random.default_rng(0)
    point = Tensor(rng.standard_normal((3, 4)))
    assert grad_check(OPS[name], point) < 1e-6


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(out >= 0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-10, 10)), st.floats(-5, 5))
def test_layer_norm_is_shift_invariant(x, shift):
    g, b = Tensor(np.ones(6)), Tensor(np.zeros(6))
    a = T.layer_norm(Tensor(x), g, b, eps=1e-6).data
    c = T.layer_norm(Tensor(x + shift), g, b, eps=1e-6).data
    np.testing.assert_allclose(a, c, atol=1e-6)
