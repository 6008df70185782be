"""
Tests for the hand-written layers.

Gradients are compared against central finite differences in binary64
(perturbation 1e-4 for the smooth layers, 1e-6 where a kink or a max can
be crossed), relative error <= 1e-3, on 20 random instances per layer.
"""

import numpy as np
import pytest

from errors import DimensionError, InvalidStateError, UsageError
from layers import (Conv1D, Flatten, LayerParams, Linear, LeakyReLU, MaxPool1D, conv1d_backward,
                    conv1d_forward, leaky_relu_backward, leaky_relu_forward, linear_backward,
                    linear_forward, maxpool1d_backward, maxpool1d_forward, softmax,
                    softmax_cross_entropy)

TRIALS = 20


def numerical_gradient(f, x, eps):
    """Central differences of the scalar function f at x (x is perturbed in place and restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=['multi_index'])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        plus = f()
        x[idx] = old - eps
        minus = f()
        x[idx] = old
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def params64(rng, shape_w, shape_b):
    return LayerParams(rng.normal(size=shape_w), rng.normal(size=shape_b))


# =============================================================================
# Conv1D
# =============================================================================

class TestConv1D:

    def test_identity_kernel(self):
        x = np.array([[[1., 2., 3.]]])
        out = conv1d_forward(x, LayerParams(np.array([[[1.]]]), np.array([0.])))
        np.testing.assert_array_equal(out, [[[1., 2., 3.]]])

    def test_two_tap_kernel(self):
        x = np.array([[[1., 2., 3.]]])
        out = conv1d_forward(x, LayerParams(np.array([[[1., 1.]]]), np.array([0.])))
        np.testing.assert_array_equal(out, [[[3., 5.]]])

    def test_bias(self):
        x = np.array([[[1., 0., -1.]]])
        out = conv1d_forward(x, LayerParams(np.array([[[2., 0.]]]), np.array([1.])))
        np.testing.assert_array_equal(out, [[[3., 1.]]])

    def test_identity_backward_passes_gradient(self):
        x = np.array([[[1., 2., 3.]]])
        p = LayerParams(np.array([[[1.]]]), np.array([0.]))
        g = np.array([[[0.5, -1., 2.]]])
        grad_input, _, grad_b = conv1d_backward(g, x, p)
        np.testing.assert_array_equal(grad_input, g)
        assert grad_b[0] == pytest.approx(1.5)

    def test_scalar_product_rule(self):
        x = np.array([[[3.]]])
        p = LayerParams(np.array([[[2.]]]), np.array([0.]))
        _, grad_w, _ = conv1d_backward(np.array([[[5.]]]), x, p)
        assert grad_w[0, 0, 0] == 15.

    def test_output_length(self):
        x = np.zeros((2, 3, 11))
        p = LayerParams(np.zeros((4, 3, 3)), np.zeros(4))
        assert conv1d_forward(x, p, stride=2, padding=1).shape == (2, 4, 6)

    def test_channel_mismatch_names_axis(self):
        p = LayerParams(np.zeros((4, 3, 3)), np.zeros(4))
        with pytest.raises(DimensionError) as info:
            conv1d_forward(np.zeros((1, 2, 8)), p)
        assert info.value.axis == 'channels'

    def test_kernel_longer_than_input(self):
        p = LayerParams(np.zeros((1, 1, 5)), np.zeros(1))
        with pytest.raises(DimensionError):
            conv1d_forward(np.zeros((1, 1, 3)), p)

    def test_backward_without_forward(self):
        with pytest.raises(InvalidStateError):
            Conv1D(LayerParams(np.zeros((1, 1, 1)), np.zeros(1))).backward(np.zeros((1, 1, 1)))

    @pytest.mark.parametrize('stride,padding', [(1, 0), (1, 2), (2, 1)])
    def test_finite_differences(self, stride, padding):
        rng = np.random.default_rng(10 + stride + padding)
        for _ in range(TRIALS):
            n, c, t, co, m = rng.integers(1, 3), rng.integers(1, 4), rng.integers(5, 17), rng.integers(1, 4), 3
            x = rng.normal(size=(n, c, t))
            p = params64(rng, (co, c, m), (co,))
            r = rng.normal(size=conv1d_forward(x, p, stride, padding).shape)
            loss = lambda: float(np.sum(conv1d_forward(x, p, stride, padding) * r))
            grad_input, grad_w, grad_b = conv1d_backward(r, x, p, stride, padding)
            assert rel_error(grad_input, numerical_gradient(loss, x, 1e-4)) <= 1e-3
            assert rel_error(grad_w, numerical_gradient(loss, p.w, 1e-4)) <= 1e-3
            assert rel_error(grad_b, numerical_gradient(loss, p.b, 1e-4)) <= 1e-3

    def test_small_case_from_scratch(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 1, 8))
        p = params64(rng, (1, 1, 3), (1,))
        loss = lambda: float(np.sum(conv1d_forward(x, p) ** 2))
        grad_input, grad_w, _ = conv1d_backward(2 * conv1d_forward(x, p), x, p)
        assert rel_error(grad_input, numerical_gradient(loss, x, 1e-4)) <= 1e-3
        assert rel_error(grad_w, numerical_gradient(loss, p.w, 1e-4)) <= 1e-3


# =============================================================================
# LeakyReLU
# =============================================================================

class TestLeakyReLU:

    def test_values(self):
        assert leaky_relu_forward(np.array(5.)) == 5.
        assert leaky_relu_forward(np.array(-1.), 0.01) == pytest.approx(-0.01)
        assert leaky_relu_backward(np.array(3.), np.array(-2.), 0.01) == pytest.approx(0.03)

    def test_finite_differences(self):
        rng = np.random.default_rng(21)
        for _ in range(TRIALS):
            x = rng.normal(size=(2, 3, 16))
            x += np.sign(x) * 0.01          # keep away from the kink
            r = rng.normal(size=x.shape)
            loss = lambda: float(np.sum(leaky_relu_forward(x) * r))
            assert rel_error(leaky_relu_backward(r, x), numerical_gradient(loss, x, 1e-6)) <= 1e-3


# =============================================================================
# MaxPool1D
# =============================================================================

class TestMaxPool1D:

    def test_windowed_max_and_routing(self):
        x = np.array([[[1., 3., 2., 0.]]])
        out, argmax = maxpool1d_forward(x, 2, 2)
        np.testing.assert_array_equal(out, [[[3., 2.]]])
        grad = maxpool1d_backward(np.array([[[1., 1.]]]), argmax, x.shape)
        np.testing.assert_array_equal(grad, [[[0., 1., 1., 0.]]])

    def test_ties_go_to_first_index(self):
        x = np.full((1, 1, 4), 5.)
        out, argmax = maxpool1d_forward(x, 2, 2)
        np.testing.assert_array_equal(out, [[[5., 5.]]])
        grad = maxpool1d_backward(np.array([[[1., 1.]]]), argmax, x.shape)
        np.testing.assert_array_equal(grad, [[[1., 0., 1., 0.]]])

    def test_window_too_wide(self):
        with pytest.raises(DimensionError):
            maxpool1d_forward(np.zeros((1, 1, 2)), 3, 1)

    def test_zero_width(self):
        with pytest.raises(UsageError):
            maxpool1d_forward(np.zeros((1, 1, 2)), 0, 1)

    def test_zero_stride_names_stride(self):
        with pytest.raises(UsageError) as info:
            maxpool1d_forward(np.zeros((1, 1, 4)), 2, 0)
        assert info.value.field == 'stride'

    def test_gradient_mass_conserved(self, rng):
        layer = MaxPool1D(2, 2)
        out = layer.forward(rng.normal(size=(2, 8, 64)))
        g = rng.normal(size=out.shape)
        assert layer.backward(g).sum() == pytest.approx(g.sum())

    def test_finite_differences(self):
        rng = np.random.default_rng(31)
        for _ in range(TRIALS):
            x = rng.normal(size=(2, 3, 16))
            out, argmax = maxpool1d_forward(x)
            r = rng.normal(size=out.shape)
            loss = lambda: float(np.sum(maxpool1d_forward(x)[0] * r))
            assert rel_error(maxpool1d_backward(r, argmax, x.shape),
                             numerical_gradient(loss, x, 1e-6)) <= 1e-3


# =============================================================================
# Linear, Flatten, Softmax
# =============================================================================

class TestLinear:

    def test_identity_like_weights(self):
        w = np.zeros((5, 256))
        w[np.arange(5), np.arange(5)] = 1
        a = np.zeros((1, 256))
        a[0, 2] = 1
        out = linear_forward(a, LayerParams(w, np.zeros(5)))
        np.testing.assert_array_equal(out, [[0, 0, 1, 0, 0]])

    def test_constant_weights(self):
        out = linear_forward(np.ones((1, 256)), LayerParams(np.full((5, 256), 0.01), np.zeros(5)))
        np.testing.assert_allclose(out, np.full((1, 5), 2.56))

    def test_feature_mismatch(self):
        with pytest.raises(DimensionError):
            linear_forward(np.zeros((2, 10)), LayerParams(np.zeros((5, 256)), np.zeros(5)))

    def test_finite_differences(self):
        rng = np.random.default_rng(41)
        for _ in range(TRIALS):
            a = rng.normal(size=(2, 12))
            p = params64(rng, (5, 12), (5,))
            r = rng.normal(size=(2, 5))
            loss = lambda: float(np.sum(linear_forward(a, p) * r))
            grad_a, grad_w, grad_b = linear_backward(r, a, p)
            assert rel_error(grad_a, numerical_gradient(loss, a, 1e-4)) <= 1e-3
            assert rel_error(grad_w, numerical_gradient(loss, p.w, 1e-4)) <= 1e-3
            assert rel_error(grad_b, numerical_gradient(loss, p.b, 1e-4)) <= 1e-3

    def test_layer_stores_gradients(self, rng):
        layer = Linear(params64(rng, (5, 8), (5,)))
        layer.forward(rng.normal(size=(3, 8)))
        layer.backward(np.ones((3, 5)))
        np.testing.assert_allclose(layer.params.grad_b, np.full(5, 3.))


class TestFlatten:

    def test_round_trip_shape(self, rng):
        layer = Flatten()
        x = rng.normal(size=(4, 8, 32))
        out = layer.forward(x)
        assert out.shape == (4, 256)
        assert layer.backward(out).shape == x.shape


class TestSoftmaxCrossEntropy:

    def test_uniform_logits(self):
        probs, loss, _ = softmax_cross_entropy(np.zeros((3, 5)), np.array([0, 1, 4]))
        np.testing.assert_allclose(probs, 0.2)
        assert loss == pytest.approx(np.log(5))

    def test_large_margin(self):
        logits = np.zeros((1, 5))
        logits[0, 3] = 60.
        _, loss, _ = softmax_cross_entropy(logits, np.array([3]))
        assert 0 <= loss < 1e-20

    def test_rows_sum_to_one(self, rng):
        probs = softmax(rng.normal(size=(6, 5)) * 10)
        np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(UsageError):
            softmax_cross_entropy(np.zeros((1, 5)), np.array([5]))

    def test_finite_differences(self):
        rng = np.random.default_rng(51)
        for _ in range(TRIALS):
            logits = rng.normal(size=(2, 5)) * 3
            labels = rng.integers(0, 5, size=2)
            loss = lambda: softmax_cross_entropy(logits, labels)[1]
            _, _, grad = softmax_cross_entropy(logits, labels)
            assert rel_error(grad, numerical_gradient(loss, logits, 1e-4)) <= 1e-3

    def test_gradient_formula(self):
        logits = np.array([[1., 2., 3., 4., 5.]])
        probs, _, grad = softmax_cross_entropy(logits, np.array([2]))
        expected = probs.copy()
        expected[0, 2] -= 1
        np.testing.assert_allclose(grad, expected)
