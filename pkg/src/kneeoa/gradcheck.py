"""Finite-difference verification of every differentiable op.

Each case draws a random small instance, reduces the op output to a
scalar through a fixed random projection, and compares the tape
gradients against central differences in float64. Multi-valued ops
(maxpool argmax, relu kink, log clamps) get inputs nudged away from
their non-differentiable sets so both f(x+h) and f(x-h) stay on the
same branch.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tape, Tensor, backward
from .errors import ArgumentError

FD_STEP = 1e-6
TOLERANCE = 1e-4


def numeric_grad(f: Callable[..., float], arrays: list[np.ndarray],
                 h: float = FD_STEP) -> list[np.ndarray]:
    """Central-difference gradient of f with respect to each input array."""
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f(*arrays)
            flat[j] = orig - h
            fm = f(*arrays)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


class Case:
    """One op instance: input arrays plus value and gradient closures."""

    def __init__(self, arrays: list[np.ndarray], value_fn, grad_fn):
        self.arrays = arrays
        self.value_fn = value_fn
        self.grad_fn = grad_fn

    def run(self) -> float:
        analytic = self.grad_fn(*self.arrays)
        numeric = numeric_grad(self.value_fn, self.arrays)
        return max_relative_error(analytic, numeric)


def _wrap(build_graph) -> tuple[Callable, Callable]:
    """Split a graph builder into a pure value function and a gradient
    function. ``build_graph(tape, *arrays)`` must return (scalar_out,
    list_of_watched_tensors)."""

    def value_fn(*arrays) -> float:
        out, _ = build_graph(Tape(), *arrays)
        return out.item()

    def grad_fn(*arrays) -> list[np.ndarray]:
        tape = Tape()
        out, watched = build_graph(tape, *arrays)
        backward(out, tape)
        return [t.grad.copy() for t in watched]

    return value_fn, grad_fn


def _projection(rng: np.random.Generator, builder) -> np.ndarray:
    """Sample a projection matching the op's output shape via a dry run."""
    out = builder()
    return rng.standard_normal(out.shape)


def _distinct(rng: np.random.Generator, shape) -> np.ndarray:
    """Values with pairwise gaps far above the FD step, randomly placed."""
    n = int(np.prod(shape))
    vals = rng.permutation(n).astype(np.float64) * 1e-2
    vals += rng.uniform(0.0, 1e-3, size=n)
    return vals.reshape(shape)


# --- case builders, one per op ---------------------------------------------


def case_conv2d(rng: np.random.Generator) -> Case:
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 4))
    o = int(rng.integers(1, 4))
    h = int(rng.integers(3, 7))
    w = int(rng.integers(3, 7))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    padding = str(rng.choice(["same", "valid"]))
    x = rng.standard_normal((n, c, h, w))
    kern = rng.standard_normal((o, c, k, k))
    b = rng.standard_normal(o)
    proj = _projection(rng, lambda: ad.conv2d(
        Tensor(x), Tensor(kern), Tensor(b), padding, stride))

    def graph(tape, xa, ka, ba):
        xt = Tensor(xa, requires_grad=True)
        kt = Tensor(ka, requires_grad=True)
        bt = Tensor(ba, requires_grad=True)
        out = ad.conv2d(xt, kt, bt, padding, stride, tape)
        return ad.weighted_sum(out, proj, tape), [xt, kt, bt]

    return Case([x, kern, b], *_wrap(graph))


def case_maxpool2(rng: np.random.Generator) -> Case:
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)),
             int(rng.integers(2, 7)), int(rng.integers(2, 7)))
    x = _distinct(rng, shape)
    proj = _projection(rng, lambda: ad.maxpool2(Tensor(x)))

    def graph(tape, xa):
        xt = Tensor(xa, requires_grad=True)
        out = ad.maxpool2(xt, tape)
        return ad.weighted_sum(out, proj, tape), [xt]

    return Case([x], *_wrap(graph))


def case_upsample_nn(rng: np.random.Generator) -> Case:
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)),
             int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    factor = int(rng.integers(1, 4))
    x = rng.standard_normal(shape)
    proj = _projection(rng, lambda: ad.upsample_nn(Tensor(x), factor))

    def graph(tape, xa):
        xt = Tensor(xa, requires_grad=True)
        out = ad.upsample_nn(xt, factor, tape)
        return ad.weighted_sum(out, proj, tape), [xt]

    return Case([x], *_wrap(graph))


def _case_batchnorm(rng: np.random.Generator, mode: str) -> Case:
    shape = (int(rng.integers(2, 4)), int(rng.integers(1, 4)),
             int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    c = shape[1]
    x = rng.standard_normal(shape) * 2.0
    gamma = rng.uniform(0.5, 1.5, c)
    beta = rng.standard_normal(c)
    run_mean = rng.standard_normal(c) * 0.3
    run_var = rng.uniform(0.5, 2.0, c)

    def make_state():
        st = ad.BatchNormState(c, dtype=np.float64)
        st.mean[:] = run_mean
        st.var[:] = run_var
        return st

    proj = _projection(rng, lambda: ad.batchnorm(
        Tensor(x), Tensor(gamma), Tensor(beta), mode, make_state()))

    def graph(tape, xa, ga, ba):
        xt = Tensor(xa, requires_grad=True)
        gt = Tensor(ga, requires_grad=True)
        bt = Tensor(ba, requires_grad=True)
        out = ad.batchnorm(xt, gt, bt, mode, make_state(), tape=tape)
        return ad.weighted_sum(out, proj, tape), [xt, gt, bt]

    return Case([x, gamma, beta], *_wrap(graph))


def case_batchnorm_train(rng):
    return _case_batchnorm(rng, "train")


def case_batchnorm_infer(rng):
    return _case_batchnorm(rng, "infer")


def case_dropout(rng: np.random.Generator) -> Case:
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 8)))
    p = float(rng.uniform(0.1, 0.7))
    mask_seed = int(rng.integers(0, 2 ** 31))
    x = rng.standard_normal(shape)
    proj = rng.standard_normal(shape)

    def graph(tape, xa):
        xt = Tensor(xa, requires_grad=True)
        out = ad.dropout(xt, p, "train", np.random.default_rng(mask_seed), tape)
        return ad.weighted_sum(out, proj, tape), [xt]

    return Case([x], *_wrap(graph))


def case_dense(rng: np.random.Generator) -> Case:
    n = int(rng.integers(1, 5))
    d = int(rng.integers(1, 7))
    u = int(rng.integers(1, 6))
    x = rng.standard_normal((n, d))
    w = rng.standard_normal((d, u))
    b = rng.standard_normal(u)
    proj = rng.standard_normal((n, u))

    def graph(tape, xa, wa, ba):
        xt = Tensor(xa, requires_grad=True)
        wt = Tensor(wa, requires_grad=True)
        bt = Tensor(ba, requires_grad=True)
        out = ad.dense(xt, wt, bt, tape)
        return ad.weighted_sum(out, proj, tape), [xt, wt, bt]

    return Case([x, w, b], *_wrap(graph))


def case_relu(rng: np.random.Generator) -> Case:
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 8)))
    x = rng.uniform(-1.0, 1.0, shape)
    x += 0.01 * np.sign(x) + (x == 0) * 0.01  # keep clear of the kink
    proj = rng.standard_normal(shape)

    def graph(tape, xa):
        xt = Tensor(xa, requires_grad=True)
        out = ad.relu(xt, tape)
        return ad.weighted_sum(out, proj, tape), [xt]

    return Case([x], *_wrap(graph))


def case_sigmoid(rng: np.random.Generator) -> Case:
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 8)))
    x = rng.uniform(-4.0, 4.0, shape)
    proj = rng.standard_normal(shape)

    def graph(tape, xa):
        xt = Tensor(xa, requires_grad=True)
        out = ad.sigmoid(xt, tape)
        return ad.weighted_sum(out, proj, tape), [xt]

    return Case([x], *_wrap(graph))


def case_softmax(rng: np.random.Generator) -> Case:
    shape = (int(rng.integers(1, 5)), int(rng.integers(2, 7)))
    x = rng.standard_normal(shape) * 2.0
    proj = rng.standard_normal(shape)

    def graph(tape, xa):
        xt = Tensor(xa, requires_grad=True)
        out = ad.softmax(xt, tape)
        return ad.weighted_sum(out, proj, tape), [xt]

    return Case([x], *_wrap(graph))


def case_flatten(rng: np.random.Generator) -> Case:
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)),
             int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    x = rng.standard_normal(shape)
    proj = rng.standard_normal((shape[0], int(np.prod(shape[1:]))))

    def graph(tape, xa):
        xt = Tensor(xa, requires_grad=True)
        out = ad.flatten(xt, tape)
        return ad.weighted_sum(out, proj, tape), [xt]

    return Case([x], *_wrap(graph))


def case_add(rng: np.random.Generator) -> Case:
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 6)))
    a = rng.standard_normal(shape)
    b = rng.standard_normal(shape)
    proj = rng.standard_normal(shape)

    def graph(tape, aa, ba):
        at = Tensor(aa, requires_grad=True)
        bt = Tensor(ba, requires_grad=True)
        out = ad.add(at, bt, tape)
        return ad.weighted_sum(out, proj, tape), [at, bt]

    return Case([a, b], *_wrap(graph))


def case_scale(rng: np.random.Generator) -> Case:
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 6)))
    c = float(rng.uniform(-2.0, 2.0))
    x = rng.standard_normal(shape)
    proj = rng.standard_normal(shape)

    def graph(tape, xa):
        xt = Tensor(xa, requires_grad=True)
        out = ad.scale(xt, c, tape)
        return ad.weighted_sum(out, proj, tape), [xt]

    return Case([x], *_wrap(graph))


def case_weighted_sum(rng: np.random.Generator) -> Case:
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 6)))
    x = rng.standard_normal(shape)
    wts = rng.standard_normal(shape)

    def graph(tape, xa):
        xt = Tensor(xa, requires_grad=True)
        return ad.weighted_sum(xt, wts, tape), [xt]

    return Case([x], *_wrap(graph))


def case_bce_pixelwise(rng: np.random.Generator) -> Case:
    shape = (int(rng.integers(1, 3)), 1, int(rng.integers(2, 6)), int(rng.integers(2, 6)))
    pred = rng.uniform(0.05, 0.95, shape)
    target = rng.integers(0, 2, shape).astype(np.float64)

    def graph(tape, pa):
        pt = Tensor(pa, requires_grad=True)
        return losses.bce_pixelwise(pt, target, tape), [pt]

    return Case([pred], *_wrap(graph))


def case_cce(rng: np.random.Generator) -> Case:
    n = int(rng.integers(1, 6))
    k = int(rng.integers(2, 6))
    probs = rng.uniform(0.05, 0.95, (n, k))
    labels = rng.integers(0, k, n)

    def graph(tape, pa):
        pt = Tensor(pa, requires_grad=True)
        return losses.cce(pt, labels, tape), [pt]

    return Case([probs], *_wrap(graph))


def case_mse(rng: np.random.Generator) -> Case:
    n = int(rng.integers(1, 7))
    pred = rng.standard_normal(n)
    target = rng.standard_normal(n)

    def graph(tape, pa):
        pt = Tensor(pa, requires_grad=True)
        return losses.mse(pt, target, tape), [pt]

    return Case([pred], *_wrap(graph))


def case_joint_loss(rng: np.random.Generator) -> Case:
    n = int(rng.integers(2, 6))
    k = 5
    probs = rng.uniform(0.05, 0.95, (n, k))
    labels = rng.integers(0, k, n)
    reg = rng.uniform(0.0, 4.0, n)
    target = rng.uniform(0.0, 4.0, n)
    w = float(rng.uniform(0.0, 1.0))

    def graph(tape, pa, ra):
        pt = Tensor(pa, requires_grad=True)
        rt = Tensor(ra, requires_grad=True)
        c = losses.cce(pt, labels, tape)
        m = losses.mse(rt, target, tape)
        return losses.joint_loss(c, m, w, tape), [pt, rt]

    return Case([probs, reg], *_wrap(graph))


def case_l2_penalty(rng: np.random.Generator) -> Case:
    shapes = [(int(rng.integers(1, 4)), int(rng.integers(1, 4)))
              for _ in range(int(rng.integers(1, 4)))]
    arrays = [rng.standard_normal(s) for s in shapes]
    lam = float(rng.uniform(0.001, 0.1))

    def graph(tape, *arrs):
        ts = [Tensor(a, requires_grad=True) for a in arrs]
        return losses.l2_penalty(ts, lam, tape), ts

    return Case(arrays, *_wrap(graph))


def case_composite_chain(rng: np.random.Generator) -> Case:
    """conv -> batchnorm -> relu -> pool -> flatten -> dense -> softmax -> cce."""
    n = int(rng.integers(2, 4))
    c, o = 1, int(rng.integers(1, 3))
    hw = int(rng.choice([4, 6]))
    u = int(rng.integers(2, 5))
    x = rng.standard_normal((n, c, hw, hw))
    kern = rng.standard_normal((o, c, 3, 3)) * 0.5
    kb = np.zeros(o)
    gamma = rng.uniform(0.5, 1.5, o)
    beta = rng.standard_normal(o) * 0.1
    d = o * (hw // 2) ** 2
    w = rng.standard_normal((d, u)) * 0.5
    b = np.zeros(u)
    labels = rng.integers(0, u, n)

    def graph(tape, xa, ka, ga, ba, wa, da):
        xt = Tensor(xa, requires_grad=True)
        kt = Tensor(ka, requires_grad=True)
        gt = Tensor(ga, requires_grad=True)
        bt = Tensor(ba, requires_grad=True)
        wt = Tensor(wa, requires_grad=True)
        dt = Tensor(da, requires_grad=True)
        h1 = ad.conv2d(xt, kt, Tensor(kb), "same", 1, tape)
        h2 = ad.batchnorm(h1, gt, bt, "train", ad.BatchNormState(o, np.float64), tape=tape)
        h3 = ad.relu(h2, tape)
        h4 = ad.maxpool2(h3, tape)
        h5 = ad.flatten(h4, tape)
        h6 = ad.dense(h5, wt, dt, tape)
        p = ad.softmax(h6, tape)
        return losses.cce(p, labels, tape), [xt, kt, gt, bt, wt, dt]

    return Case([x, kern, gamma, beta, w, b], *_wrap(graph))


CASES: dict[str, Callable[[np.random.Generator], Case]] = {
    "conv2d": case_conv2d,
    "maxpool2": case_maxpool2,
    "upsample_nn": case_upsample_nn,
    "batchnorm_train": case_batchnorm_train,
    "batchnorm_infer": case_batchnorm_infer,
    "dropout": case_dropout,
    "dense": case_dense,
    "relu": case_relu,
    "sigmoid": case_sigmoid,
    "softmax": case_softmax,
    "flatten": case_flatten,
    "add": case_add,
    "scale": case_scale,
    "weighted_sum": case_weighted_sum,
    "bce_pixelwise": case_bce_pixelwise,
    "cce": case_cce,
    "mse": case_mse,
    "joint_loss": case_joint_loss,
    "l2_penalty": case_l2_penalty,
    "composite_chain": case_composite_chain,
}


def run_op(name: str, n_shapes: int = 20, seed: int = 0) -> float:
    """Max relative error over n_shapes random instances of one op."""
    if name not in CASES:
        raise ArgumentError(f"unknown op {name!r}; known: {', '.join(sorted(CASES))}")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_shapes):
        worst = max(worst, CASES[name](rng).run())
    return worst


def run_all(n_shapes: int = 20, seed: int = 0) -> dict[str, tuple[float, float]]:
    """Run every case; returns {op: (max_rel_err, seconds)}."""
    results = {}
    for name in CASES:
        t0 = time.perf_counter()
        err = run_op(name, n_shapes, seed)
        results[name] = (err, time.perf_counter() - t0)
    return results
