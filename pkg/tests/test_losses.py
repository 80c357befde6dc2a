"""Loss values and gradients against hand arithmetic."""

import math

import numpy as np
import pytest

from kneeoa.autodiff import Tape, Tensor, backward
from kneeoa.errors import ArgumentError, DimensionError
from kneeoa.losses import bce_pixelwise, cce, joint_loss, l2_penalty, mse


def t(data, requires_grad=False, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


class TestBcePixelwise:
    def test_half_probability(self):
        pred = t(np.full((1, 1, 2, 2), 0.5))
        loss = bce_pixelwise(pred, np.ones((1, 1, 2, 2), dtype=np.float32))
        assert loss.item() == pytest.approx(math.log(2.0), rel=1e-6)

    def test_mean_over_pixels(self):
        pred = t([[[[0.9, 0.2]]]])
        target = np.array([[[[1.0, 0.0]]]], dtype=np.float32)
        expected = (-math.log(0.9) - math.log(0.8)) / 2.0
        assert bce_pixelwise(pred, target).item() == pytest.approx(expected, rel=1e-5)

    def test_gradient(self):
        pred = Tensor(np.array([[[[0.8, 0.3]]]], dtype=np.float32), requires_grad=True)
        target = np.array([[[[1.0, 0.0]]]], dtype=np.float32)
        tape = Tape()
        loss = bce_pixelwise(pred, target, tape)
        backward(loss, tape)
        # d/dp of -[t ln p + (1-t) ln(1-p)] / n = (p - t) / (p (1-p) n)
        n = 2
        expected = [(0.8 - 1.0) / (0.8 * 0.2 * n), (0.3 - 0.0) / (0.3 * 0.7 * n)]
        np.testing.assert_allclose(pred.grad[0, 0, 0], expected, rtol=1e-4)

    def test_saturated_prediction_is_finite_with_zero_grad(self):
        pred = Tensor(np.array([[[[0.0, 1.0]]]], dtype=np.float32), requires_grad=True)
        target = np.array([[[[0.0, 1.0]]]], dtype=np.float32)
        tape = Tape()
        loss = bce_pixelwise(pred, target, tape)
        assert math.isfinite(loss.item())
        backward(loss, tape)
        np.testing.assert_allclose(pred.grad, 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            bce_pixelwise(t(np.ones((1, 1, 2, 2))), np.ones((1, 1, 3, 3), dtype=np.float32))


class TestCce:
    def test_single_row(self):
        loss = cce(t([[0.7, 0.2, 0.05, 0.03, 0.02]]), [0])
        assert loss.item() == pytest.approx(-math.log(0.7), rel=1e-6)

    def test_mean_over_rows(self):
        probs = t([[0.5, 0.5, 0.0, 0.0, 0.0], [0.25, 0.75, 0.0, 0.0, 0.0]])
        expected = (-math.log(0.5) - math.log(0.75)) / 2.0
        assert cce(probs, [0, 1]).item() == pytest.approx(expected, rel=1e-5)

    def test_zero_probability_is_clamped(self):
        loss = cce(t([[0.0, 1.0, 0.0, 0.0, 0.0]]), [0])
        assert loss.item() == pytest.approx(-math.log(1e-7), rel=1e-5)

    def test_gradient_only_on_true_class(self):
        probs = Tensor(np.array([[0.5, 0.3, 0.1, 0.05, 0.05]], dtype=np.float32),
                       requires_grad=True)
        tape = Tape()
        loss = cce(probs, [1], tape)
        backward(loss, tape)
        assert probs.grad[0, 1] == pytest.approx(-1.0 / 0.3, rel=1e-5)
        assert probs.grad[0, 0] == 0.0

    @pytest.mark.parametrize("labels", [[5], [-1], [1.5]])
    def test_label_validation(self, labels):
        with pytest.raises(ArgumentError):
            cce(t([[0.2, 0.2, 0.2, 0.2, 0.2]]), labels)


class TestMse:
    def test_hand_value(self):
        assert mse(t([1.0, 2.0]), [0.0, 0.0]).item() == pytest.approx(2.5)

    def test_gradient(self):
        pred = Tensor(np.array([3.0, -1.0], dtype=np.float32), requires_grad=True)
        tape = Tape()
        loss = mse(pred, [1.0, 1.0], tape)
        backward(loss, tape)
        np.testing.assert_allclose(pred.grad, [2.0 * 2 / 2, 2.0 * -2 / 2])

    def test_size_mismatch(self):
        with pytest.raises(DimensionError):
            mse(t([1.0, 2.0]), [1.0, 2.0, 3.0])


class TestJointLoss:
    def test_weighted_combination(self):
        total = joint_loss(t(2.0), t(4.0), weight=0.5)
        assert total.item() == pytest.approx(4.0)

    def test_weight_bounds(self):
        for w in (-0.1, 1.1):
            with pytest.raises(ArgumentError):
                joint_loss(t(1.0), t(1.0), weight=w)

    def test_gradients_split_by_weight(self):
        a = Tensor(np.array(2.0, dtype=np.float32), requires_grad=True)
        b = Tensor(np.array(4.0, dtype=np.float32), requires_grad=True)
        tape = Tape()
        total = joint_loss(a, b, weight=0.25, tape=tape)
        backward(total, tape)
        assert a.grad == pytest.approx(1.0)
        assert b.grad == pytest.approx(0.25)


class TestL2Penalty:
    def test_hand_value(self):
        w = Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
        assert l2_penalty([w], lam=0.01).item() == pytest.approx(0.05, rel=1e-6)

    def test_gradient_is_2_lambda_w(self):
        w = Tensor(np.array([1.0, -3.0], dtype=np.float32), requires_grad=True)
        tape = Tape()
        loss = l2_penalty([w], lam=0.5, tape=tape)
        backward(loss, tape)
        np.testing.assert_allclose(w.grad, [1.0, -3.0])

    def test_sums_over_parameters(self):
        a = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        b = Tensor(np.full(2, 2.0, dtype=np.float32), requires_grad=True)
        assert l2_penalty([a, b], lam=1.0).item() == pytest.approx(3.0 + 8.0)

    def test_validation(self):
        w = Tensor(np.ones(1, dtype=np.float32), requires_grad=True)
        with pytest.raises(ArgumentError):
            l2_penalty([w], lam=-1.0)
        with pytest.raises(ArgumentError):
            l2_penalty([], lam=0.1)
