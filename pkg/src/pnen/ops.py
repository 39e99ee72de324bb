"""Differentiable numerical ops on :class:`~pnen.tensor.Tensor`.

Every op checks its result for NaN/Inf and, when a tape is active and an
input needs gradients, registers a backward closure.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, record


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def conv_output_size(size: int, kernel: int, stride: int, dilation: int, pad: int) -> int:
    return (size + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


def _im2col(xp, kh, kw, sh, sw, dh, dw, oh, ow):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        y0 = i * dh
        for j in range(kw):
            x0 = j * dw
            cols[:, :, i, j] = xp[:, :, y0 : y0 + sh * (oh - 1) + 1 : sh, x0 : x0 + sw * (ow - 1) + 1 : sw]
    return cols


def _col2im(dcols, padded_shape, kh, kw, sh, sw, dh, dw, oh, ow):
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(kh):
        y0 = i * dh
        for j in range(kw):
            x0 = j * dw
            dxp[:, :, y0 : y0 + sh * (oh - 1) + 1 : sh, x0 : x0 + sw * (ow - 1) + 1 : sw] += dcols[:, :, i, j]
    return dxp


def conv2d(x: Tensor, layer, padding=None) -> Tensor:
    """Cross-correlation of ``x`` with ``layer`` (stride, dilation, zero pad).

    ``padding`` overrides the layer's own padding for this call; the pyramid
    embeddings use it to tile maps whose size is not a multiple of the stride.
    """
    w, b = layer.weight, layer.bias
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if c != ci:
        raise ConfigError(f"conv2d: input has {c} channels, layer expects {ci}")
    sh, sw = layer.stride
    dh, dw = layer.dilation
    ph, pw = _pair(padding) if padding is not None else layer.padding
    oh = conv_output_size(h, kh, sh, dh, ph)
    ow = conv_output_size(wd, kw, sw, dw, pw)
    if oh < 1 or ow < 1:
        raise ConfigError(f"conv2d: output size {oh}x{ow} for input {h}x{wd}")

    xd = x.data
    if kh == kw == 1 and sh == sw == 1 and ph == pw == 0:
        # 1x1 fast path: no column buffer
        cols = xd.reshape(n, c, h * wd)
        padded_shape = None
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
        padded_shape = xp.shape
        cols = _im2col(xp, kh, kw, sh, sw, dh, dw, oh, ow).reshape(n, c * kh * kw, oh * ow)
    wmat = w.data.reshape(co, ci * kh * kw)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(n, co, oh, ow)

    def backward(g):
        g2 = g.reshape(n, co, oh * ow)
        gw = None
        if w.requires_grad:
            gw = np.matmul(g2, np.swapaxes(cols, 1, 2)).sum(axis=0).reshape(w.shape)
        gb = g2.sum(axis=(0, 2)) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2)
            if padded_shape is None:
                gx = dcols.reshape(x.shape)
            else:
                dxp = _col2im(dcols.reshape(n, c, kh, kw, oh, ow), padded_shape, kh, kw, sh, sw, dh, dw, oh, ow)
                gx = dxp[:, :, ph : ph + h, pw : pw + wd]
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return record("conv2d", out, inputs, backward)


def batchnorm(x: Tensor, layer) -> Tensor:
    """Per-channel normalisation; batch statistics in train mode, running ones in eval."""
    n, c, h, w = x.shape
    if c != layer.channels:
        raise ConfigError(f"batchnorm: input has {c} channels, layer expects {layer.channels}")
    count = n * h * w
    if count == 0:
        raise ConfigError("batchnorm: empty batch")
    gamma, beta, eps = layer.gamma, layer.beta, layer.epsilon
    xd = x.data
    shape = (1, c, 1, 1)

    if layer.training:
        mean = xd.mean(axis=(0, 2, 3))
        xc = xd - mean.reshape(shape)
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv.reshape(shape)
        m = layer.momentum
        layer.running_mean[...] = (1 - m) * layer.running_mean + m * mean
        layer.running_var[...] = (1 - m) * layer.running_var + m * var
    else:
        inv = 1.0 / np.sqrt(layer.running_var + eps)
        xhat = (xd - layer.running_mean.reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    training = layer.training

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shape)
            if training:
                mean_g = gxhat.mean(axis=(0, 2, 3)).reshape(shape)
                mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3)).reshape(shape)
                gx = (gxhat - mean_g - xhat * mean_gx) * inv.reshape(shape)
            else:
                gx = gxhat * inv.reshape(shape)
        return gx, gg, gb

    return record("batchnorm", out, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return record("relu", out, (x,), lambda g: (g * mask,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.shape[-1] != b.shape[-2]:
        raise ConfigError(f"matmul: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return record("matmul", out, (a, b), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record("softmax_rows", y, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul_const(x: Tensor, c: float) -> Tensor:
    return record("mul_const", x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


def scale(x: Tensor, weights: Tensor, index: int) -> Tensor:
    """``weights[index] * x`` with gradients flowing to both."""
    wv = weights.data[index]

    def backward(g):
        gw = None
        if weights.requires_grad:
            gw = np.zeros_like(weights.data)
            gw[index] = (g * x.data).sum()
        return g * wv, gw

    return record("scale", x.data * wv, (x, weights), backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return record("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_squares(x: Tensor) -> Tensor:
    xd = x.data
    return record("sum_squares", np.asarray((xd * xd).sum(), dtype=x.dtype), (x,), lambda g: (2 * g * xd,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return record("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in xs], axis=axis)
    return record("concat", out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def pool_matrix(size: int, bins: int, dtype=np.float64) -> np.ndarray:
    """(bins, size) averaging matrix; bin i spans [floor(i*size/bins), floor((i+1)*size/bins))."""
    if not 1 <= bins <= size:
        raise ConfigError(f"pool size {bins} exceeds spatial size {size}")
    p = np.zeros((bins, size), dtype=dtype)
    for i in range(bins):
        lo, hi = (i * size) // bins, ((i + 1) * size) // bins
        p[i, lo:hi] = 1.0 / (hi - lo)
    return p


def adaptive_avg_pool(x: Tensor, bins: int) -> Tensor:
    """Average-pool an (n, c, h, w) map down to (n, c, bins, bins)."""
    _, _, h, w = x.shape
    ph = pool_matrix(h, bins, x.dtype)
    pw = pool_matrix(w, bins, x.dtype)
    out = np.einsum("ih,nchw,jw->ncij", ph, x.data, pw, optimize=True)
    return record(
        "adaptive_avg_pool", out, (x,), lambda g: (np.einsum("ih,ncij,jw->nchw", ph, g, pw, optimize=True),)
    )


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """sum(x * weights) for a constant weight array; seeds arbitrary output gradients."""
    wts = np.asarray(weights, dtype=x.dtype)
    if wts.shape != x.shape:
        raise ConfigError(f"weighted_sum: {wts.shape} vs {x.shape}")
    return record("weighted_sum", np.asarray((x.data * wts).sum(), dtype=x.dtype), (x,), lambda g: (g * wts,))
