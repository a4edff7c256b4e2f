"""Layer primitives with explicit forward/backward passes.

Feature maps are channel-major ``(C, N, H, W)`` so that a convolution is one
``(C_out, C_in*k*k) @ (C_in*k*k, N*H*W)`` product whose result is already in
the output layout. Kernels keep the conventional ``(C_out, C_in, k, k)`` shape.
"""

from __future__ import annotations

import numpy as np


def _im2col(x, k):
    c, n, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((c, k, k, n, h, w), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, ky, kx] = xp[:, :, ky:ky + h, kx:kx + w]
    return cols.reshape(c * k * k, n * h * w)


def conv_forward(x, w, b):
    """Stride-1 'same' convolution with zero padding ``k // 2``.

    Args:
        x: input of shape (C_in, N, H, W).
        w: kernels of shape (C_out, C_in, k, k), k odd.
        b: biases of shape (C_out,).

    Returns:
        (out, cache), out of shape (C_out, N, H, W).
    """
    c, n, h, wd = x.shape
    c_out, c_in, k, _ = w.shape
    if c != c_in:
        raise ValueError(f"conv expects {c_in} input channels, got {c}")
    cols = _im2col(x, k)
    out = w.reshape(c_out, -1) @ cols
    out += b[:, None]
    return out.reshape(c_out, n, h, wd), (x.shape, cols, w)


def conv_backward(dout, cache, need_dx=True):
    """Gradients of :func:`conv_forward` as (dx, dw, db); dx is None if not needed."""
    (c, n, h, wd), cols, w = cache
    c_out, _, k, _ = w.shape
    dflat = dout.reshape(c_out, -1)
    dw = (dflat @ cols.T).reshape(w.shape)
    db = dflat.sum(axis=1)
    if not need_dx:
        return None, dw, db
    p = k // 2
    dcols = (w.reshape(c_out, -1).T @ dflat).reshape(c, k, k, n, h, wd)
    dxp = np.zeros((c, n, h + 2 * p, wd + 2 * p), dtype=dout.dtype)
    for ky in range(k):
        for kx in range(k):
            dxp[:, :, ky:ky + h, kx:kx + wd] += dcols[:, ky, kx]
    return dxp[:, :, p:p + h, p:p + wd], dw, db


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dout, cache):
    return dout * (cache > 0)


def maxpool_forward(x, size=2):
    """Non-overlapping ``size x size`` max pool over the last two axes.

    Trailing rows/columns that do not fill a window are dropped.
    """
    h, w = x.shape[-2:]
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ValueError(f"cannot pool {h}x{w} by {size}")
    # window offsets in row-major order; ties resolve to the earliest offset
    parts = [x[..., dy:ho * size:size, dx:wo * size:size]
             for dy in range(size) for dx in range(size)]
    out = parts[0].copy()
    for part in parts[1:]:
        np.maximum(out, part, out=out)
    return out, (x.shape, parts, out, size)


def maxpool_backward(dout, cache):
    shape, parts, out, size = cache
    h, w = shape[-2:]
    ho, wo = h // size, w // size
    dx = np.zeros(shape, dtype=dout.dtype)
    taken = np.zeros(out.shape, dtype=bool)
    i = 0
    for dy in range(size):
        for dx_ in range(size):
            hit = (parts[i] == out) & ~taken
            taken |= hit
            dx[..., dy:ho * size:size, dx_:wo * size:size] = dout * hit
            i += 1
    return dx


def dense_forward(x, w, b):
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def mse_loss(predictions, targets):
    """Mean squared error and its gradient ``2 (p - t) / N`` with respect to p.

    The loss is accumulated in 64-bit; the gradient keeps the prediction dtype.
    """
    p = np.asarray(predictions)
    t = np.asarray(targets)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("empty batch")
    diff = p.astype(np.float64) - t.astype(np.float64)
    loss = float(np.mean(diff * diff))
    grad = (2.0 * diff / p.size).astype(p.dtype if p.dtype.kind == "f" else np.float64)
    return loss, grad
