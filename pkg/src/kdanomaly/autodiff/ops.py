"""Differentiable operations.

Forward values are stored in the dtype of the inputs; reductions and products
accumulate in float64.  Each op hands :func:`make_output` a closure computing
the gradient with respect to its inputs given the gradient of its output.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ArgumentError, DimensionError
from .tensor import Tensor, make_output

_f64 = np.float64


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype), dtype=like.dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic -----------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = a.data.astype(_f64) + b.data.astype(_f64)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_output("add", (a, b), out, vjp)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = a.data.astype(_f64) - b.data.astype(_f64)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_output("sub", (a, b), out, vjp)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    a64, b64 = a.data.astype(_f64), b.data.astype(_f64)

    def vjp(g):
        return _unbroadcast(g * b64, a.shape), _unbroadcast(g * a64, b.shape)

    return make_output("mul", (a, b), a64 * b64, vjp)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = x.data.astype(_f64).sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_output("sum", (x,), out, vjp)


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = x.data.astype(_f64).mean()

    def vjp(g):
        return (np.full(x.shape, float(g) / n),)

    return make_output("mean", (x,), out, vjp)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return make_output("reshape", (x,), out, vjp)


def relu(x: Tensor) -> Tensor:
    """``max(0, v)`` elementwise; the subgradient at exactly 0 is 0."""
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return make_output("relu", (x,), np.where(mask, x.data, 0), vjp)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; no gradient flows there."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, value, x.data)

    def vjp(g):
        return (np.where(mask, 0.0, g),)

    return make_output("masked_fill", (x,), out, vjp)


# -- linear algebra ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    a64, b64 = a.data.astype(_f64), b.data.astype(_f64)

    def vjp(g):
        return g @ b64.T, a64.T @ g

    return make_output("matmul", (a, b), a64 @ b64, vjp)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a 2-d tensor, got {x.shape}")

    def vjp(g):
        return (g.T,)

    return make_output("transpose", (x,), x.data.T.copy(), vjp)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w.T + b`` for ``x`` of shape [N, in] and ``w`` of shape [out, in]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {x.shape}, weight {w.shape}")
    x64, w64 = x.data.astype(_f64), w.data.astype(_f64)
    out = x64 @ w64.T
    if b is not None:
        out = out + b.data.astype(_f64)
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g):
        grads = [g @ w64, g.T @ x64]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_output("linear", inputs, out, vjp)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of a 2-D tensor to unit Euclidean norm."""
    x64 = x.data.astype(_f64)
    norm = np.sqrt((x64 * x64).sum(axis=1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x64 / norm

    def vjp(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return make_output("l2_normalize", (x,), y, vjp)


# -- convolution and spatial ops ------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding.

    ``x`` is [N, C, H, W], ``w`` is [O, C, k, k] and ``b`` an optional [O] bias.
    """
    if stride < 1 or pad < 0:
        raise ArgumentError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c or kh != kw:
        raise DimensionError(f"conv2d channel/kernel mismatch: input {x.shape}, kernel {w.shape}")
    k = kh
    if k > h + 2 * pad or k > wd + 2 * pad:
        raise DimensionError(f"kernel {k}x{k} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)

    xp = np.pad(x.data.astype(_f64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # cols: [N*ho*wo, C*k*k]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = w.data.astype(_f64).reshape(o, c * k * k)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data.astype(_f64)
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        dw = (gflat.T @ cols).reshape(w.shape)
        dx = None
        if x.requires_grad:
            dcols = (gflat @ wmat).reshape(n, ho, wo, c, k, k)
            dxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            dx = dxp[:, :, pad:pad + h, pad:pad + wd]
        grads = [dx, dw]
        if b is not None:
            grads.append(gflat.sum(axis=0))
        return grads

    return make_output("conv2d", inputs, out, vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes: [N, C, H, W] -> [N, C]."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.astype(_f64).mean(axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),)

    return make_output("global_avg_pool", (x,), out, vjp)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"upsample expects [N,C,H,W], got {x.shape}")
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.shape

    def vjp(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_output("upsample", (x,), out, vjp)


def rot90(x: Tensor, k: int) -> Tensor:
    """Rotate the last two axes counter-clockwise by ``k`` quarter turns.

    For ``k=1`` the output at ``(i, j)`` reads the source at ``(j, W-1-i)``,
    e.g. ``[[1, 2], [3, 4]] -> [[2, 4], [1, 3]]``.
    """
    if isinstance(k, bool) or int(k) != k or not 0 <= k <= 3:
        raise ArgumentError(f"rot90 needs k in 0..3, got {k!r}")
    k = int(k)
    out = np.rot90(x.data, k, axes=(-2, -1)).copy()

    def vjp(g):
        return (np.rot90(g, -k, axes=(-2, -1)),)

    return make_output("rot90", (x,), out, vjp)


# -- losses -------------------------------------------------------------------------

def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error; ``target`` is treated as a constant."""
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target_data.shape:
        raise DimensionError(f"mse_loss shape mismatch: {pred.shape} vs {target_data.shape}")
    diff = pred.data.astype(_f64) - target_data.astype(_f64)
    n = diff.size

    def vjp(g):
        return (2.0 * float(g) * diff / n,)

    return make_output("mse_loss", (pred,), (diff * diff).mean(), vjp)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [N, K], got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ArgumentError(f"labels must lie in 0..{k - 1}")
    z = logits.data.astype(_f64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (logsum - z[rows, labels]).mean()

    def vjp(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (float(g) * p / n,)

    return make_output("softmax_cross_entropy", (logits,), loss, vjp)
