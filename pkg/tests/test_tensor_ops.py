"""Forward semantics of the tensor primitives."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from proxyattn.rng import Rng
from proxyattn.tensor import (ShapeError, Tensor, add, broadcast_to, elementwise,
                              layer_norm, linear, matmul, mean_all, mean_axis,
                              mul, narrow, reshape, scale, sigmoid, softmax_last,
                              sqrt, sub, sum_last, tanh, transpose)

# Frozen oracle: softmax([1,2,3]) computed with 50-digit mpmath arithmetic.
SOFTMAX_123 = (0.09003057317038046, 0.24472847105479764, 0.6652409557748219)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(a, Tensor(np.eye(2)))
        assert np.array_equal(out.data, a.data)

    def test_hand_product(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        assert matmul(a, b).data.tolist() == [[19.0, 22.0], [43.0, 50.0]]

    def test_zero_matrix(self):
        rng = Rng(1)
        a = Tensor(rng.normal((3, 4)))
        out = matmul(a, Tensor(np.zeros((4, 2))))
        assert np.array_equal(out.data, np.zeros((3, 2)))

    def test_batched_broadcast(self):
        rng = Rng(2)
        a = rng.normal((5, 3, 4))
        w = rng.normal((4, 2))
        out = matmul(Tensor(a), Tensor(w))
        assert out.shape == (5, 3, 2)
        assert np.allclose(out.data, a @ w)

    def test_inner_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


class TestSoftmax:
    def test_uniform(self):
        out = softmax_last(Tensor([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_shift_invariance(self):
        rng = Rng(3)
        x = rng.normal((4, 6))
        a = softmax_last(Tensor(x)).data
        b = softmax_last(Tensor(x + 123.456)).data
        assert np.allclose(a, b, atol=1e-14)

    def test_high_precision_oracle(self):
        out = softmax_last(Tensor([1.0, 2.0, 3.0])).data
        assert np.allclose(out, SOFTMAX_123, rtol=0, atol=1e-15)

    def test_extreme_values_stay_finite(self):
        out = softmax_last(Tensor([1e300, -1e300, 0.0])).data
        assert np.isfinite(out).all()
        assert abs(out.sum() - 1.0) < 1e-12

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=6),
                  elements=st.floats(-1e6, 1e6)))
    def test_rows_sum_to_one_and_nonneg(self, x):
        out = softmax_last(Tensor(x)).data
        assert (out >= 0).all()
        assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-12


class TestElementwise:
    def test_sigmoid_symmetry_point(self):
        assert elementwise("sigmoid", Tensor(0.0)).data == 0.5

    def test_tanh_odd(self):
        assert elementwise("tanh", Tensor(0.0)).data == 0.0
        x = Tensor([1.25, -0.5])
        assert np.allclose(tanh(x).data, -tanh(Tensor([-1.25, 0.5])).data)

    def test_additive_identity(self):
        rng = Rng(4)
        a = rng.normal((3, 3))
        out = add(Tensor(a), Tensor(np.zeros((3, 3))))
        assert np.array_equal(out.data, a)

    def test_scalar_broadcast(self):
        a = Tensor([[1.0, 2.0]])
        assert np.array_equal(mul(a, Tensor(3.0)).data, [[3.0, 6.0]])
        assert np.array_equal(sub(a, Tensor(1.0)).data, [[0.0, 1.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown elementwise kind"):
            elementwise("powwow", Tensor(1.0))

    def test_sigmoid_extremes(self):
        out = sigmoid(Tensor([-800.0, 800.0])).data
        assert np.isfinite(out).all()
        assert out[0] == 0.0 and out[1] == 1.0


class TestLinear:
    def test_identity_weight(self):
        rng = Rng(5)
        x = rng.normal((4, 3))
        out = linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        assert np.array_equal(out.data, x)

    def test_zero_input_broadcasts_bias(self):
        b = np.array([1.0, -2.0])
        out = linear(Tensor(np.zeros((3, 4))), Tensor(np.zeros((4, 2))), Tensor(b))
        assert np.array_equal(out.data, np.tile(b, (3, 1)))

    def test_matches_matmul(self):
        rng = Rng(6)
        x, w = rng.normal((2, 5, 3)), rng.normal((3, 4))
        out = linear(Tensor(x), Tensor(w))
        assert np.allclose(out.data, matmul(Tensor(x), Tensor(w)).data)


class TestLayerNorm:
    def test_constant_slice_is_zero(self):
        out = layer_norm(Tensor(np.full((2, 5), 3.7)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
        assert np.allclose(out.data, 0.0, atol=1e-12)

    def test_already_normalized(self):
        out = layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        assert np.allclose(out.data, [1.0, -1.0], atol=1e-5)

    def test_statistics(self):
        rng = Rng(7)
        x = rng.normal((6, 32), 3.0)
        out = layer_norm(Tensor(x), Tensor(np.ones(32)), Tensor(np.zeros(32))).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-10
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-4

    def test_needs_width(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor([[1.0]]), Tensor(np.ones(1)), Tensor(np.zeros(1)))


class TestShaping:
    def test_reshape_transpose_roundtrip(self):
        rng = Rng(8)
        x = rng.normal((2, 3, 4))
        y = transpose(reshape(Tensor(x), (6, 4)), (1, 0))
        assert y.shape == (4, 6)
        assert np.array_equal(y.data, x.reshape(6, 4).T)

    def test_broadcast_to(self):
        x = Tensor(np.arange(3.0).reshape(1, 3))
        out = broadcast_to(x, (4, 3))
        assert np.array_equal(out.data, np.tile(np.arange(3.0), (4, 1)))

    def test_narrow(self):
        x = Tensor(np.arange(12.0).reshape(4, 3))
        out = narrow(x, 0, 1, 2)
        assert np.array_equal(out.data, np.arange(12.0).reshape(4, 3)[1:3])
        with pytest.raises(ShapeError):
            narrow(x, 0, 3, 2)

    def test_reductions(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert np.array_equal(sum_last(x).data, [3.0, 12.0])
        assert np.array_equal(mean_axis(x, 0).data, [1.5, 2.5, 3.5])
        assert mean_all(x).data == 2.5
        assert np.array_equal(mean_axis(x, 1, keepdims=True).data, [[1.0], [4.0]])

    def test_sqrt_scale(self):
        x = Tensor([4.0, 9.0])
        assert np.array_equal(sqrt(x).data, [2.0, 3.0])
        assert np.array_equal(scale(x, 0.5).data, [2.0, 4.5])


class TestPurity:
    def test_repeat_is_bitwise_identical(self):
        rng = Rng(9)
        x = Tensor(rng.normal((5, 7)))
        w = Tensor(rng.normal((7, 7)))
        for op in (lambda: matmul(x, w), lambda: softmax_last(x),
                   lambda: layer_norm(x, Tensor(np.ones(7)), Tensor(np.zeros(7))),
                   lambda: tanh(x), lambda: sigmoid(x)):
            a, b = op(), op()
            assert a.data.tobytes() == b.data.tobytes()

    def test_inputs_not_mutated(self):
        x = Tensor([[1.0, 2.0]])
        before = x.data.copy()
        _ = softmax_last(scale(add(x, x), 2.0))
        assert np.array_equal(x.data, before)
