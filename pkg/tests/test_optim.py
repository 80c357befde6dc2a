"""Optimizer updates against explicit python recurrences."""

import math

import numpy as np
import pytest

from kneeoa.autodiff import Tensor
from kneeoa.errors import ArgumentError, StateError
from kneeoa.optim import (
    AdamState,
    NesterovState,
    SchedulerState,
    adam_step,
    reduce_lr_on_plateau,
    sgd_nesterov_step,
)


def param(values, dtype=np.float32):
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True)


def adam_oracle(w0, grads, lr=0.001, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar reference recurrence, plain python floats."""
    w, m, v = float(w0), 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        w -= lr * mhat / (math.sqrt(vhat) + eps)
    return w


def nesterov_oracle(w0, grads, lr=0.001, mu=0.9):
    w, v = float(w0), 0.0
    for g in grads:
        v = mu * v - lr * g
        w += mu * v - lr * g
    return w


class TestAdam:
    def test_first_step_hand_value(self):
        # float64 so the comparison is about the update rule, not storage
        w = param([1.0], dtype=np.float64)
        state = AdamState.for_params([w], lr=0.001)
        adam_step([w], grads=[np.array([0.1])], state=state)
        expected = adam_oracle(1.0, [0.1])
        assert abs(float(w.data[0]) - expected) < 1e-9
        assert float(w.data[0]) == pytest.approx(0.9990, abs=1e-6)

    def test_matches_recurrence_over_steps(self):
        rng = np.random.default_rng(3)
        grads = rng.standard_normal(12).tolist()
        w = param([0.5])
        state = AdamState.for_params([w], lr=0.01)
        for g in grads:
            adam_step([w], grads=[np.array([g], dtype=np.float32)], state=state)
        assert float(w.data[0]) == pytest.approx(
            adam_oracle(0.5, grads, lr=0.01), abs=1e-5)

    def test_quadratic_convergence(self):
        # f(w) = 0.5 (w - 3)^2, minimum at 3; Adam's near-constant step
        # needs a lr large enough to cover the distance inside the budget
        w = param([0.0], dtype=np.float64)
        state = AdamState.for_params([w], lr=0.05)
        for _ in range(500):
            g = w.data - 3.0
            adam_step([w], grads=[g], state=state)
        assert abs(float(w.data[0]) - 3.0) < 1e-3

    def test_uses_tensor_grads_when_not_given(self):
        w = param([1.0])
        w.grad = np.array([0.1], dtype=np.float32)
        state = AdamState.for_params([w])
        adam_step([w], state=state)
        assert float(w.data[0]) == pytest.approx(0.9990, abs=1e-6)

    def test_missing_grad_rejected(self):
        w = param([1.0])
        state = AdamState.for_params([w])
        with pytest.raises(StateError):
            adam_step([w], state=state)

    def test_state_binding_checked(self):
        w = param([1.0])
        other = param([[1.0, 2.0]])
        state = AdamState.for_params([other])
        with pytest.raises(StateError):
            adam_step([w], grads=[np.array([0.1], dtype=np.float32)], state=state)

    def test_state_required(self):
        with pytest.raises(StateError):
            adam_step([param([1.0])], grads=[np.zeros(1)])


class TestNesterov:
    def test_first_step_hand_value(self):
        # v = -0.001, w += 0.9 * v - 0.001 * 1 = -0.0019
        w = param([0.0], dtype=np.float64)
        state = NesterovState.for_params([w], lr=0.001)
        sgd_nesterov_step([w], grads=[np.array([1.0])], state=state, momentum=0.9)
        assert abs(float(w.data[0]) - (-0.0019)) < 1e-9

    def test_matches_recurrence_over_steps(self):
        rng = np.random.default_rng(9)
        grads = rng.standard_normal(15).tolist()
        w = param([2.0])
        state = NesterovState.for_params([w], lr=0.005)
        for g in grads:
            sgd_nesterov_step([w], grads=[np.array([g], dtype=np.float32)],
                              state=state)
        assert float(w.data[0]) == pytest.approx(
            nesterov_oracle(2.0, grads, lr=0.005), abs=1e-5)

    def test_quadratic_convergence(self):
        w = param([0.0])
        state = NesterovState.for_params([w], lr=0.01)
        for _ in range(500):
            g = w.data - 3.0
            sgd_nesterov_step([w], grads=[g], state=state)
        assert abs(float(w.data[0]) - 3.0) < 1e-3

    def test_momentum_range(self):
        w = param([0.0])
        state = NesterovState.for_params([w])
        with pytest.raises(ArgumentError):
            sgd_nesterov_step([w], grads=[np.zeros(1)], state=state, momentum=1.0)


class TestScheduler:
    def test_reduces_after_patience_stalls(self):
        state = SchedulerState(lr=0.001, factor=10.0, patience=4)
        lrs = [reduce_lr_on_plateau(state, v)
               for v in [1.0, 0.9, 0.9, 0.9, 0.9, 0.9]]
        assert lrs == [0.001, 0.001, 0.001, 0.001, 0.001, 0.0001]

    def test_improvement_resets_counter(self):
        state = SchedulerState(lr=0.1, factor=10.0, patience=2)
        for v in [1.0, 1.0, 0.5, 0.5]:
            reduce_lr_on_plateau(state, v)
        assert state.lr == 0.1  # never stalled for 2 consecutive checks
        reduce_lr_on_plateau(state, 0.5)
        assert state.lr == pytest.approx(0.01)

    def test_equal_value_is_not_improvement(self):
        state = SchedulerState(lr=1.0, factor=2.0, patience=1)
        reduce_lr_on_plateau(state, 0.5)
        assert reduce_lr_on_plateau(state, 0.5) == pytest.approx(0.5)

    def test_counter_resets_after_reduction(self):
        state = SchedulerState(lr=1.0, factor=2.0, patience=2)
        for v in [1.0, 1.0, 1.0]:  # two stalls after the first best
            reduce_lr_on_plateau(state, v)
        assert state.lr == pytest.approx(0.5)
        assert state.counter == 0

    def test_nan_rejected(self):
        state = SchedulerState()
        with pytest.raises(ArgumentError):
            reduce_lr_on_plateau(state, float("nan"))

    def test_history_recorded(self):
        state = SchedulerState()
        reduce_lr_on_plateau(state, 3.0)
        reduce_lr_on_plateau(state, 2.0)
        assert state.history == [3.0, 2.0]
