"""Differentiable ops on NCHW tensors.

Conventions: cross-correlation (kernels are not flipped); 3x3 convolutions
use padding 1, 1x1 convolutions padding 0; transposed convolutions are
stride 2, padding 1, output padding 1 so spatial size doubles exactly.
Ops compute in the dtype of their inputs, which lets gradient checks run the
same code in float64.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DegenerateVarianceError, ShapeError
from .tensor import Tensor, as_tensor

LEAKY_SLOPE = 0.2
NORM_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check4d(name: str, t: Tensor) -> None:
    if t.ndim != 4:
        raise ShapeError(f"{name} must be 4-D [N,C,H,W], got shape {t.shape}")


def conv_output_size(size: int, k: int, stride: int) -> int:
    pad = 1 if k == 3 else 0
    return (size + 2 * pad - k) // stride + 1


# -- convolution ------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches as a [C*k*k, N*Ho*Wo] matrix (channel-major rows)."""
    n, c = xp.shape[:2]
    if k == 1:
        win = xp[:, :, ::stride, ::stride][:, :, :ho, :wo]
        return win.transpose(1, 0, 2, 3).reshape(c, n * ho * wo)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    _check4d("input", x)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] not in (1, 3):
        raise ShapeError(f"weight must be [F,C,k,k] with k in (1, 3), got {weight.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    n, c, h, w = x.shape
    f, cw, k, _ = weight.shape
    if c != cw:
        raise ShapeError(f"input has C={c} channels but weight expects C={cw}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"bias shape {bias.shape} does not match F={f}")
    pad = 1 if k == 3 else 0
    ho, wo = conv_output_size(h, k, stride), conv_output_size(w, k, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(f, -1)
    out2d = wmat @ cols
    if bias is not None:
        out2d += bias.data[:, None]
    out = np.ascontiguousarray(out2d.reshape(f, n, ho, wo).transpose(1, 0, 2, 3))

    def backward_fn(g):
        g2d = g.transpose(1, 0, 2, 3).reshape(f, -1)
        dw = (g2d @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        db = g2d.sum(axis=1) if bias is not None and bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2d).reshape(c, k, k, n, ho, wo)
            dxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    dxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += (
                        dcols[:, ki, kj].transpose(1, 0, 2, 3))
            dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward_fn)


def tconv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-2 transposed 3x3 convolution; ``weight`` is [C_in, F, 3, 3]."""
    _check4d("input", x)
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"transposed-conv weight must be [C,F,3,3], got {weight.shape}")
    n, c, h, w = x.shape
    cw, f = weight.shape[:2]
    if c != cw:
        raise ShapeError(f"input has C={c} channels but weight expects C={cw}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"bias shape {bias.shape} does not match F={f}")
    x2d = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    wmat = weight.data.reshape(c, f * 9)
    cols = (wmat.T @ x2d).reshape(f, 3, 3, n, h, w)
    full = np.zeros((n, f, 2 * h + 1, 2 * w + 1), dtype=cols.dtype)
    for ki in range(3):
        for kj in range(3):
            full[:, :, ki : ki + 2 * h : 2, kj : kj + 2 * w : 2] += cols[:, ki, kj].transpose(1, 0, 2, 3)
    out = full[:, :, 1:, 1:]
    if bias is not None:
        out += bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward_fn(g):
        gfull = np.zeros((f, n, 2 * h + 1, 2 * w + 1), dtype=g.dtype)
        gfull[:, :, 1:, 1:] = g.transpose(1, 0, 2, 3)
        gcols = np.empty((f, 3, 3, n, h, w), dtype=g.dtype)
        for ki in range(3):
            for kj in range(3):
                gcols[:, ki, kj] = gfull[:, :, ki : ki + 2 * h : 2, kj : kj + 2 * w : 2]
        gcols = gcols.reshape(f * 9, n * h * w)
        dx = (wmat @ gcols).reshape(c, n, h, w).transpose(1, 0, 2, 3) if x.requires_grad else None
        dw = (x2d @ gcols.T).reshape(weight.shape) if weight.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward_fn)


def upsample_nearest2x(x: Tensor) -> Tensor:
    _check4d("input", x)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward_fn(g):
        n, c, h2, w2 = g.shape
        return (g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return Tensor._from_op(out, (x,), backward_fn)


# -- normalization ------------------------------------------------------------

def _normalize(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple[int, ...], mean, var, batch_stats: bool):
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}")
    inv_std = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (x.data - mean) * inv_std
    g4 = gamma.data[None, :, None, None]
    out = xhat * g4 + beta.data[None, :, None, None]
    m = int(np.prod([x.shape[a] for a in axes]))

    def backward_fn(gout):
        dgamma = (gout * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = gout.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = gout * g4
            if batch_stats:
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                dx = inv_std * (dxhat - s1 / m - xhat * (s2 / m))
            else:
                dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward_fn)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place; in eval mode the running values are
    used instead.
    """
    _check4d("input", x)
    axes = (0, 2, 3)
    if training:
        n, _, h, w = x.shape
        if n * h * w < 2:
            raise DegenerateVarianceError(
                f"batchnorm in train mode needs N*H*W >= 2, got N={n}, H={h}, W={w}")
        mean = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        running_mean *= 1 - momentum
        running_mean += momentum * mean.reshape(-1).astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(-1).astype(running_var.dtype)
        return _normalize(x, gamma, beta, axes, mean, var, batch_stats=True)
    mean = running_mean.astype(x.dtype)[None, :, None, None]
    var = running_var.astype(x.dtype)[None, :, None, None]
    return _normalize(x, gamma, beta, axes, mean, var, batch_stats=False)


def instancenorm2d(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    _check4d("input", x)
    h, w = x.shape[2:]
    if h * w < 2:
        raise DegenerateVarianceError(f"instance norm needs H*W >= 2, got {h}x{w}")
    axes = (2, 3)
    mean = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    return _normalize(x, gamma, beta, axes, mean, var, batch_stats=True)


# -- elementwise -------------------------------------------------------------

def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    mask = x.data >= 0
    out = np.where(mask, x.data, x.data * x.dtype.type(slope))
    return Tensor._from_op(out, (x,), lambda g: (np.where(mask, g, g * g.dtype.type(slope)),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    # keep outputs strictly inside (-1, 1) even where float32 tanh rounds to +-1
    bound = np.nextafter(x.dtype.type(1), x.dtype.type(0))
    y = np.clip(np.tanh(x.data), -bound, bound)
    return Tensor._from_op(y, (x,), lambda g: (g * (1 - y * y),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x)
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


# -- structural ----------------------------------------------------------------

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check4d("a", a)
    _check4d("b", b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concat {a.shape} with {b.shape}: N, H, W must agree")
    c1 = a.shape[1]
    out = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=1)
    return Tensor._from_op(out, (a, b), lambda g: (g[:, :c1], g[:, c1:]))


def broadcast_plane(value: float, h: int, w: int, dtype=np.float32) -> Tensor:
    if not np.isfinite(value):
        raise ValueError(f"plane value must be finite, got {value}")
    return Tensor(np.full((1, 1, h, w), value, dtype=dtype))


def broadcast_planes(values: np.ndarray, h: int, w: int, dtype=np.float32) -> Tensor:
    """Per-sample constant planes: ``values`` [N, K] -> Tensor[N, K, H, W]."""
    values = np.asarray(values, dtype=dtype)
    if values.ndim != 2 or not np.all(np.isfinite(values)):
        raise ValueError("plane values must be a finite [N, K] array")
    return Tensor(np.broadcast_to(values[:, :, None, None], values.shape + (h, w)).copy())


# -- loss --------------------------------------------------------------------

def mse(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data.astype(pred.dtype, copy=False)
    n = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=pred.dtype)

    def backward_fn(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return Tensor._from_op(out, (pred, target), backward_fn)


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a constant scalar."""
    return Tensor._from_op(x.data * x.dtype.type(s), (x,), lambda g: (g * s,))
