"""Optimizers and the plateau learning-rate scheduler.

Step functions mutate parameter tensors in place. State objects hold the
per-parameter slots plus the step counter and current learning rate; a
state is bound to one parameter list and refuses any other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ArgumentError, StateError


def _check_binding(slots: list[np.ndarray], params: list[Tensor], kind: str) -> None:
    if len(slots) != len(params):
        raise StateError(
            f"{kind} state holds {len(slots)} slots but got {len(params)} parameters"
        )
    for i, (s, p) in enumerate(zip(slots, params)):
        if s.shape != p.data.shape:
            raise StateError(
                f"{kind} slot {i} has shape {s.shape}, parameter has {p.data.shape}"
            )


def _gather_grads(params: list[Tensor], grads) -> list[np.ndarray]:
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ArgumentError(f"got {len(grads)} gradients for {len(params)} parameters")
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise StateError(f"parameter {i} has no gradient; run backward first")
        g = np.asarray(g)
        if g.shape != p.data.shape:
            raise StateError(
                f"gradient {i} has shape {g.shape}, parameter has {p.data.shape}"
            )
        out.append(g)
    return out


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 0.001

    @classmethod
    def for_params(cls, params: list[Tensor], lr: float = 0.001) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], t=0, lr=lr)


def adam_step(params: list[Tensor], grads=None, state: AdamState | None = None,
              lr: float | None = None, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One Adam update with bias correction; eps is added outside the sqrt."""
    if state is None:
        raise StateError("adam_step needs an initialized AdamState")
    if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
        raise ArgumentError(f"betas must be in [0, 1), got {beta1}, {beta2}")
    if eps <= 0:
        raise ArgumentError(f"eps must be positive, got {eps}")
    _check_binding(state.m, params, "adam")
    gs = _gather_grads(params, grads)
    if lr is not None:
        if lr <= 0:
            raise ArgumentError(f"learning rate must be positive, got {lr}")
        state.lr = lr
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, gs, state.m, state.v):
        g = g.astype(p.data.dtype, copy=False)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= state.lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class NesterovState:
    velocity: list[np.ndarray]
    t: int = 0
    lr: float = 0.001

    @classmethod
    def for_params(cls, params: list[Tensor], lr: float = 0.001) -> "NesterovState":
        return cls(velocity=[np.zeros_like(p.data) for p in params], t=0, lr=lr)


def sgd_nesterov_step(params: list[Tensor], grads=None,
                      state: NesterovState | None = None, lr: float | None = None,
                      momentum: float = 0.9) -> None:
    """Nesterov momentum in the gradient-at-current-point form:

        v <- mu * v - lr * g
        w <- w + mu * v - lr * g
    """
    if state is None:
        raise StateError("sgd_nesterov_step needs an initialized NesterovState")
    if not 0.0 <= momentum < 1.0:
        raise ArgumentError(f"momentum must be in [0, 1), got {momentum}")
    _check_binding(state.velocity, params, "nesterov")
    gs = _gather_grads(params, grads)
    if lr is not None:
        if lr <= 0:
            raise ArgumentError(f"learning rate must be positive, got {lr}")
        state.lr = lr
    state.t += 1
    for p, g, v in zip(params, gs, state.velocity):
        g = g.astype(p.data.dtype, copy=False)
        v *= momentum
        v -= state.lr * g
        p.data += momentum * v - state.lr * g


@dataclass
class SchedulerState:
    """Reduce-on-plateau bookkeeping: divide lr when the monitored value
    has not strictly improved for ``patience`` consecutive checks."""

    lr: float = 0.001
    factor: float = 10.0
    patience: int = 4
    best: float = math.inf
    counter: int = 0
    history: list[float] = field(default_factory=list)


def reduce_lr_on_plateau(state: SchedulerState, value: float) -> float:
    """Feed one monitored value; returns the (possibly reduced) lr."""
    if state.factor <= 1.0:
        raise ArgumentError(f"factor must be > 1, got {state.factor}")
    if state.patience < 1:
        raise ArgumentError(f"patience must be >= 1, got {state.patience}")
    if math.isnan(value):
        raise ArgumentError("monitored value is NaN")
    state.history.append(value)
    if value < state.best:
        state.best = value
        state.counter = 0
    else:
        state.counter += 1
        if state.counter >= state.patience:
            state.lr = state.lr / state.factor
            state.counter = 0
    return state.lr
