"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps a contiguous row-major numpy buffer plus an optional
gradient buffer of the same shape. Differentiable operations take Tensor
inputs, compute the forward result eagerly, and append a record to a
Tape. ``backward`` replays the tape in reverse order, accumulating
gradients into every tensor that requires them. There is no graph
retention beyond the tape: build a fresh Tape per training step.

Image tensors are laid out NCHW and convolution kernels (out_channels,
in_channels, kh, kw). All ops support float32 and float64; a single
graph must not mix the two.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ArgumentError, DimensionError

_ALLOWED_DTYPES = (np.float32, np.float64)


class Tensor:
    """A numpy array with an optional gradient buffer.

    ``requires_grad`` marks leaves (parameters, watched inputs) whose
    gradients must survive a backward pass. Interior results produced by
    ops get gradients too while the tape is replayed, but only leaves are
    guaranteed to have ``grad`` populated afterwards.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"


@dataclass
class TapeRecord:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], None]


@dataclass
class Tape:
    """Ordered log of executed ops; replayed in reverse by ``backward``."""

    records: list[TapeRecord] = field(default_factory=list)
    _produced: set[int] = field(default_factory=set)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        self.records.append(TapeRecord(out, inputs, backward_fn))
        self._produced.add(id(out))

    def needs_grad(self, t: Tensor) -> bool:
        """True if t is a watched leaf or was produced by an earlier op,
        so its gradient matters to someone."""
        return t.requires_grad or id(t) in self._produced

    def __len__(self) -> int:
        return len(self.records)


def _check_dtypes(*tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        names = sorted(d.name for d in dtypes)
        raise DimensionError(f"mixed dtypes in one op: {names}")


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from loss.

    Gradients of leaves are reset before accumulation, so repeated calls
    with the same tape give identical results. Parameters that appear on
    the tape but do not influence the loss end up with zero gradients.
    """
    if loss.data.size != 1:
        raise ArgumentError(f"loss must be scalar, got shape {loss.shape}")

    produced = {id(rec.out) for rec in tape.records}
    for rec in tape.records:
        rec.out.grad = None
        for t in rec.inputs:
            if t.requires_grad and id(t) not in produced:
                t.grad = np.zeros_like(t.data)

    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = rec.out.grad
        if g is None:
            continue
        rec.backward_fn(g)


# ---------------------------------------------------------------------------
# convolution


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    # 'same' keeps ceil(size / stride) outputs; extra padding goes after,
    # matching the usual asymmetric convention.
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    before = total // 2
    return before, total - before


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: str = "same",
           stride: int = 1, tape: Tape | None = None) -> Tensor:
    """2-D cross-correlation over NCHW input with an OIKhKw kernel."""
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d input must be NCHW, got {x.shape}")
    if kernel.data.ndim != 4:
        raise DimensionError(f"conv2d kernel must be 4-D, got {kernel.shape}")
    if bias.data.ndim != 1 or bias.shape[0] != kernel.shape[0]:
        raise DimensionError(
            f"bias shape {bias.shape} does not match {kernel.shape[0]} output channels"
        )
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"input has {x.shape[1]} channels but kernel expects {kernel.shape[1]}"
        )
    if not isinstance(stride, int) or stride < 1:
        raise ArgumentError(f"stride must be a positive integer, got {stride!r}")
    if padding not in ("same", "valid"):
        raise ArgumentError(f"padding must be 'same' or 'valid', got {padding!r}")
    _check_dtypes(x, kernel, bias)

    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    if padding == "same":
        pt, pb = _same_pads(h, kh, stride)
        pl, pr = _same_pads(w, kw, stride)
    else:
        pt = pb = pl = pr = 0
        if h < kh or w < kw:
            raise DimensionError(
                f"valid conv needs input >= kernel, got {(h, w)} vs {(kh, kw)}"
            )

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    oh = (h + pt + pb - kh) // stride + 1
    ow = (w + pl + pr - kw) // stride + 1

    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (n, c, oh, ow, kh, kw)
    # GEMM formulation: rows are output positions, columns are patch values.
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * oh * ow, c * kh * kw
    )
    wmat = kernel.data.reshape(o, c * kh * kw)
    out_mat = cols @ wmat.T
    out_data = out_mat.reshape(n, oh, ow, o).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    out = Tensor(np.ascontiguousarray(out_data))

    if tape is not None:
        need_dx = tape.needs_grad(x)

        def bwd(gout: np.ndarray) -> None:
            gmat = np.ascontiguousarray(gout.transpose(0, 2, 3, 1)).reshape(n * oh * ow, o)
            if bias.requires_grad:
                bias.accumulate_grad(gout.sum(axis=(0, 2, 3)))
            if kernel.requires_grad:
                kernel.accumulate_grad((gmat.T @ cols).reshape(kernel.shape))
            if need_dx:
                dcols = gmat @ wmat  # (n*oh*ow, c*kh*kw)
                dcols = dcols.reshape(n, oh, ow, c, kh, kw)
                dxp = np.zeros_like(xp)
                for u in range(kh):
                    for v in range(kw):
                        dxp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride] += (
                            dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
                        )
                dx = dxp[:, :, pt:pt + h, pl:pl + w]
                x.accumulate_grad(np.ascontiguousarray(dx))

        tape.record(out, (x, kernel, bias), bwd)
    return out


def maxpool2(x: Tensor, tape: Tape | None = None) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/cols are dropped.

    Ties inside a window resolve to the first element in row-major order,
    which fixes the backward routing.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2 input must be NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise DimensionError(f"maxpool2 needs spatial dims >= 2, got {(h, w)}")
    h2, w2 = h // 2, w // 2
    xt = x.data[:, :, :2 * h2, :2 * w2]
    win = xt.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    out = Tensor(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0])

    if tape is not None:
        def bwd(gout: np.ndarray) -> None:
            d4 = np.zeros((n, c, h2, w2, 4), dtype=gout.dtype)
            np.put_along_axis(d4, idx[..., None], gout[..., None], axis=-1)
            dxt = d4.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
                n, c, 2 * h2, 2 * w2
            )
            if (h, w) != (2 * h2, 2 * w2):
                dx = np.zeros_like(x.data)
                dx[:, :, :2 * h2, :2 * w2] = dxt
            else:
                dx = np.ascontiguousarray(dxt)
            x.accumulate_grad(dx)

        tape.record(out, (x,), bwd)
    return out


def upsample_nn(x: Tensor, factor: int, tape: Tape | None = None) -> Tensor:
    """Nearest-neighbour spatial upsampling by an integer factor."""
    if x.data.ndim != 4:
        raise DimensionError(f"upsample_nn input must be NCHW, got {x.shape}")
    if not isinstance(factor, int) or factor < 1:
        raise ArgumentError(f"factor must be a positive integer, got {factor!r}")
    out = Tensor(x.data.repeat(factor, axis=2).repeat(factor, axis=3))

    if tape is not None:
        n, c, h, w = x.shape

        def bwd(gout: np.ndarray) -> None:
            dx = gout.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
            x.accumulate_grad(dx)

        tape.record(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# normalization and regularizing layers


class BatchNormState:
    """Running mean/variance for one batchnorm layer, one entry per channel."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def reset(self) -> None:
        self.mean[:] = 0.0
        self.var[:] = 1.0


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str,
              state: BatchNormState, momentum: float = 0.99, eps: float = 1e-5,
              tape: Tape | None = None) -> Tensor:
    """Per-channel batch normalization over NCHW input.

    Training mode normalizes with biased batch statistics (accumulated in
    float64 for a stable, order-independent reduction) and updates the
    running stats in place; inference mode uses the running stats only.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm input must be NCHW, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}"
        )
    if eps <= 0:
        raise ArgumentError(f"eps must be positive, got {eps}")
    if not 0.0 <= momentum < 1.0:
        raise ArgumentError(f"momentum must be in [0, 1), got {momentum}")
    if mode not in ("train", "infer"):
        raise ArgumentError(f"mode must be 'train' or 'infer', got {mode!r}")
    _check_dtypes(x, gamma, beta)
    dt = x.dtype

    if mode == "train":
        x64 = x.data.astype(np.float64)
        mean = x64.mean(axis=(0, 2, 3))
        var = x64.var(axis=(0, 2, 3))
        state.mean[:] = (momentum * state.mean.astype(np.float64)
                         + (1.0 - momentum) * mean).astype(state.mean.dtype)
        state.var[:] = (momentum * state.var.astype(np.float64)
                        + (1.0 - momentum) * var).astype(state.var.dtype)
        mean_c = mean.astype(dt)
        var_c = var.astype(dt)
    else:
        mean_c = state.mean.astype(dt)
        var_c = state.var.astype(dt)

    inv_std = (1.0 / np.sqrt(var_c + np.asarray(eps, dtype=dt))).astype(dt)
    xhat = (x.data - mean_c[None, :, None, None]) * inv_std[None, :, None, None]
    out = Tensor(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None])

    if tape is not None:
        n, _, h, w = x.shape
        m = n * h * w

        def bwd(gout: np.ndarray) -> None:
            if gamma.requires_grad:
                gamma.accumulate_grad((gout * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta.accumulate_grad(gout.sum(axis=(0, 2, 3)))
            dxhat = gout * gamma.data[None, :, None, None]
            if mode == "train":
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv_std[None, :, None, None]
            x.accumulate_grad(dx.astype(dt, copy=False))

        tape.record(out, (x, gamma, beta), bwd)
    return out


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None = None,
            tape: Tape | None = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Inference mode (and p == 0) is the identity and records nothing.
    """
    if not 0.0 <= p < 1.0:
        raise ArgumentError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "infer"):
        raise ArgumentError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "infer" or p == 0.0:
        return x
    if rng is None:
        raise ArgumentError("dropout in train mode needs an rng")

    keep = (rng.random(x.shape) >= p)
    scale_v = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale_v
    out = Tensor(x.data * mask)

    if tape is not None:
        def bwd(gout: np.ndarray) -> None:
            x.accumulate_grad(gout * mask)

        tape.record(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# dense / activations / shape ops


def dense(x: Tensor, weight: Tensor, bias: Tensor, tape: Tape | None = None) -> Tensor:
    """Affine layer: (N, D) @ (D, U) + (U,)."""
    if x.data.ndim != 2:
        raise DimensionError(f"dense input must be 2-D, got {x.shape}")
    if weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"dense input width {x.shape[1]} does not match weight shape {weight.shape}"
        )
    if bias.shape != (weight.shape[1],):
        raise DimensionError(
            f"dense bias shape {bias.shape} does not match {weight.shape[1]} units"
        )
    _check_dtypes(x, weight, bias)
    out = Tensor(x.data @ weight.data + bias.data)

    if tape is not None:
        def bwd(gout: np.ndarray) -> None:
            if weight.requires_grad:
                weight.accumulate_grad(x.data.T @ gout)
            if bias.requires_grad:
                bias.accumulate_grad(gout.sum(axis=0))
            x.accumulate_grad(gout @ weight.data.T)

        tape.record(out, (x, weight, bias), bwd)
    return out


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    if tape is not None:
        def bwd(gout: np.ndarray) -> None:
            x.accumulate_grad(gout * (x.data > 0))

        tape.record(out, (x,), bwd)
    return out


def sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    # Split by sign to avoid overflow in exp for large |x|.
    xd = x.data
    pos = xd >= 0
    z = np.empty_like(xd)
    z[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    z[~pos] = e / (1.0 + e)
    out = Tensor(z)
    if tape is not None:
        def bwd(gout: np.ndarray) -> None:
            x.accumulate_grad(gout * z * (1.0 - z))

        tape.record(out, (x,), bwd)
    return out


def softmax(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Row-wise softmax on a 2-D tensor, stabilized by max subtraction."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax input must be 2-D, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)
    if tape is not None:
        def bwd(gout: np.ndarray) -> None:
            dot = (gout * p).sum(axis=1, keepdims=True)
            x.accumulate_grad(p * (gout - dot))

        tape.record(out, (x,), bwd)
    return out


def flatten(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Collapse all non-batch axes: (N, ...) -> (N, prod(...))."""
    if x.data.ndim < 2:
        raise DimensionError(f"flatten needs at least 2 dims, got {x.shape}")
    n = x.shape[0]
    out = Tensor(x.data.reshape(n, -1))
    if tape is not None:
        def bwd(gout: np.ndarray) -> None:
            x.accumulate_grad(gout.reshape(x.shape))

        tape.record(out, (x,), bwd)
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    _check_dtypes(a, b)
    out = Tensor(a.data + b.data)
    if tape is not None:
        def bwd(gout: np.ndarray) -> None:
            a.accumulate_grad(gout)
            b.accumulate_grad(gout)

        tape.record(out, (a, b), bwd)
    return out


def scale(x: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    cv = np.asarray(c, dtype=x.dtype)
    out = Tensor(x.data * cv)
    if tape is not None:
        def bwd(gout: np.ndarray) -> None:
            x.accumulate_grad(gout * cv)

        tape.record(out, (x,), bwd)
    return out


def weighted_sum(x: Tensor, weights: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Scalar projection sum(x * weights); weights are constants."""
    warr = np.asarray(weights, dtype=x.dtype)
    if warr.shape != x.shape:
        raise DimensionError(
            f"weights shape {warr.shape} does not match input shape {x.shape}"
        )
    out = Tensor(np.asarray(np.sum(x.data * warr), dtype=x.dtype).reshape(()))
    if tape is not None:
        def bwd(gout: np.ndarray) -> None:
            x.accumulate_grad(gout * warr)

        tape.record(out, (x,), bwd)
    return out
