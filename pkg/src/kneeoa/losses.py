"""Loss functions as differentiable tape ops.

All losses reduce to a scalar by mean over elements (pixels for the mask
loss, samples for the classification/regression losses). Log arguments
are clamped at 1e-7; the gradient is zero wherever the clamp was active,
matching the clamped forward value.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor
from .errors import ArgumentError, DimensionError

LOG_EPS = 1e-7


def _as_array(x, dtype) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=dtype)


def bce_pixelwise(pred: Tensor, target, tape: Tape | None = None) -> Tensor:
    """Mean binary cross entropy between a probability map and a 0/1 mask."""
    t = _as_array(target, pred.dtype)
    if t.shape != pred.shape:
        raise DimensionError(
            f"target shape {t.shape} does not match prediction shape {pred.shape}"
        )
    if pred.data.size == 0:
        raise ArgumentError("bce_pixelwise needs at least one element")
    dt = pred.dtype
    lo = np.asarray(LOG_EPS, dtype=dt)
    hi = np.asarray(1.0 - LOG_EPS, dtype=dt)
    p = np.clip(pred.data, lo, hi)
    n = pred.data.size
    val = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean()
    out = Tensor(np.asarray(val, dtype=dt).reshape(()))

    if tape is not None:
        active = (pred.data > lo) & (pred.data < hi)

        def bwd(gout: np.ndarray) -> None:
            g = (p - t) / (p * (1.0 - p) * n)
            pred.accumulate_grad((gout * g * active).astype(dt, copy=False))

        tape.record(out, (pred,), bwd)
    return out


def cce(probs: Tensor, labels, tape: Tape | None = None) -> Tensor:
    """Mean categorical cross entropy, -ln p[true], on probability rows."""
    if probs.data.ndim != 2:
        raise DimensionError(f"probs must be 2-D (N, K), got {probs.shape}")
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != probs.shape[0]:
        raise DimensionError(
            f"labels shape {y.shape} does not match {probs.shape[0]} rows"
        )
    n, k = probs.shape
    if n == 0:
        raise ArgumentError("cce needs at least one sample")
    if not np.issubdtype(y.dtype, np.integer):
        raise ArgumentError(f"labels must be integers, got dtype {y.dtype}")
    if y.min() < 0 or y.max() >= k:
        raise ArgumentError(
            f"labels must lie in [0, {k - 1}], got range [{y.min()}, {y.max()}]"
        )
    dt = probs.dtype
    lo = np.asarray(LOG_EPS, dtype=dt)
    p_true = probs.data[np.arange(n), y]
    p = np.maximum(p_true, lo)
    out = Tensor(np.asarray(-np.log(p).mean(), dtype=dt).reshape(()))

    if tape is not None:
        active = p_true > lo

        def bwd(gout: np.ndarray) -> None:
            g = np.zeros_like(probs.data)
            g[np.arange(n), y] = np.where(active, -1.0 / (p * n), 0.0)
            probs.accumulate_grad((gout * g).astype(dt, copy=False))

        tape.record(out, (probs,), bwd)
    return out


def mse(pred: Tensor, target, tape: Tape | None = None) -> Tensor:
    """Mean squared error over all elements."""
    t = _as_array(target, pred.dtype)
    if pred.data.size == 0:
        raise ArgumentError("mse needs at least one element")
    if t.size != pred.data.size:
        raise DimensionError(
            f"target has {t.size} elements, prediction has {pred.data.size}"
        )
    t = t.reshape(pred.shape)
    dt = pred.dtype
    n = pred.data.size
    diff = pred.data - t
    out = Tensor(np.asarray((diff * diff).mean(), dtype=dt).reshape(()))

    if tape is not None:
        def bwd(gout: np.ndarray) -> None:
            pred.accumulate_grad((gout * 2.0 * diff / n).astype(dt, copy=False))

        tape.record(out, (pred,), bwd)
    return out


def joint_loss(cce_value: Tensor, mse_value: Tensor, weight: float = 0.5,
               tape: Tape | None = None) -> Tensor:
    """Weighted sum of a classification and a regression loss.

    The regression weight is accepted anywhere in [0, 1]; values around
    0.5 are the useful range for training.
    """
    if not 0.0 <= weight <= 1.0:
        raise ArgumentError(f"loss weight must be in [0, 1], got {weight}")
    if cce_value.data.size != 1 or mse_value.data.size != 1:
        raise DimensionError("joint_loss expects scalar loss inputs")
    if cce_value.item() < 0 or mse_value.item() < 0:
        raise ArgumentError("loss components must be non-negative")
    dt = cce_value.dtype
    wv = np.asarray(weight, dtype=dt)
    out = Tensor(np.asarray(cce_value.data + wv * mse_value.data, dtype=dt).reshape(()))

    if tape is not None:
        def bwd(gout: np.ndarray) -> None:
            cce_value.accumulate_grad(gout.reshape(cce_value.shape))
            mse_value.accumulate_grad((gout * wv).reshape(mse_value.shape))

        tape.record(out, (cce_value, mse_value), bwd)
    return out


def l2_penalty(params: list[Tensor], lam: float = 0.01,
               tape: Tape | None = None) -> Tensor:
    """lam * sum of squared entries over the given weight tensors.

    Biases and batchnorm parameters are the caller's business to exclude;
    this just sums whatever it is handed.
    """
    if lam < 0:
        raise ArgumentError(f"l2 coefficient must be non-negative, got {lam}")
    if not params:
        raise ArgumentError("l2_penalty needs at least one parameter tensor")
    dt = params[0].dtype
    total = 0.0
    for p in params:
        if p.dtype != dt:
            raise DimensionError("l2_penalty parameters must share one dtype")
        total += float(np.sum(p.data.astype(np.float64) ** 2))
    lv = np.asarray(lam, dtype=dt)
    out = Tensor(np.asarray(lam * total, dtype=dt).reshape(()))

    if tape is not None:
        def bwd(gout: np.ndarray) -> None:
            for p in params:
                if p.requires_grad:
                    p.accumulate_grad((gout * 2.0 * lv * p.data).astype(dt, copy=False))

        tape.record(out, tuple(params), bwd)
    return out
