"""Differentiable layer operations on NHWC tensors.

Convolution kernels are laid out ``(kh, kw, c_in, c_out)`` for both the
regular and the transposed convolution.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, _make, as_tensor

__all__ = [
    "conv2d",
    "conv2d_transpose",
    "maxpool2d",
    "batchnorm",
    "dropout",
    "BN_EPSILON",
    "BN_MOMENTUM",
]

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


def _colsum(a: np.ndarray) -> np.ndarray:
    """Column sums of a 2-d array via BLAS (much faster than ``sum(axis=0)``)."""
    return np.ones(a.shape[0], dtype=a.dtype) @ a


def _im2col_same(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, h, w, c = x.shape
    if kh == 1 and kw == 1:
        return x.reshape(n * h * w, c)
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # n, h, w, c, kh, kw
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, kh * kw * c)


def _conv_same(x: np.ndarray, k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    kh, kw, cin, cout = k.shape
    cols = _im2col_same(x, kh, kw)
    out = cols @ k.reshape(kh * kw * cin, cout)
    return out.reshape(x.shape[:3] + (cout,)), cols


def conv2d(x, kernel, bias) -> Tensor:
    """Same-padded, stride-1 convolution (cross-correlation, as in Keras)."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects NHWC input and 4-d kernel", x.shape, kernel.shape)
    kh, kw, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError("conv2d input channels must equal kernel c_in", x.shape, kernel.shape)
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("same padding requires odd kernel extents", kernel.shape)
    if bias.shape != (cout,):
        raise ShapeError("conv2d bias must have c_out entries", bias.shape, kernel.shape)

    out, cols = _conv_same(x.data, kernel.data)
    out += bias.data
    kd = kernel.data

    def fn(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kd.shape)
        gb = _colsum(g2)
        gx = None
        if x.requires_grad:
            # gradient of a same conv is a same conv with the flipped, transposed kernel
            flipped = np.ascontiguousarray(kd[::-1, ::-1].transpose(0, 1, 3, 2))
            gx, _ = _conv_same(g, flipped)
        return gx, gk, gb

    return _make(out, (x, kernel, bias), fn, "conv2d")


def conv2d_transpose(x, kernel, bias, stride: int = 2) -> Tensor:
    """Transposed convolution whose kernel extent equals its stride.

    With a 2x2 kernel and stride 2 every input pixel paints its own
    non-overlapping 2x2 output patch, so the op is a single matmul.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    kh, kw, cin, cout = kernel.shape
    if (kh, kw) != (stride, stride):
        raise ShapeError(f"transposed conv kernel must be {stride}x{stride}", kernel.shape)
    if x.data.ndim != 4 or x.shape[-1] != cin:
        raise ShapeError("conv2d_transpose input channels must equal kernel c_in", x.shape, kernel.shape)
    if bias.shape != (cout,):
        raise ShapeError("conv2d_transpose bias must have c_out entries", bias.shape, kernel.shape)
    n, h, w, _ = x.shape
    kd = kernel.data
    kmat = kd.transpose(2, 0, 1, 3).reshape(cin, kh * kw * cout)
    xm = x.data.reshape(-1, cin)
    y = (xm @ kmat).reshape(n, h, w, kh, kw, cout)
    out = y.transpose(0, 1, 3, 2, 4, 5).reshape(n, h * kh, w * kw, cout) + bias.data

    def fn(g):
        gy = g.reshape(n, h, kh, w, kw, cout).transpose(0, 1, 3, 2, 4, 5).reshape(-1, kh * kw * cout)
        gk = (xm.T @ gy).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
        gb = _colsum(g.reshape(-1, cout))
        gx = (gy @ kmat.T).reshape(n, h, w, cin) if x.requires_grad else None
        return gx, gk, gb

    return _make(out, (x, kernel, bias), fn, "conv2d_transpose")


def maxpool2d(x) -> Tensor:
    """2x2 max pooling, stride 2.  Ties send the gradient to the first cell in
    row-major window order."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError("maxpool2d needs even spatial extents", x.shape)
    win = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def fn(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return (gx.reshape(n, h, w, c),)

    return _make(out, (x,), fn, "maxpool2d")


def batchnorm(
    x,
    gamma,
    beta,
    moving_mean: np.ndarray,
    moving_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPSILON,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-channel batch normalization over N, H, W.

    Returns the output and the (possibly updated) moving statistics.  The
    input arrays are never modified in place.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    for arr in (gamma.data, beta.data, moving_mean, moving_var):
        if arr.shape != (c,):
            raise ShapeError("batchnorm statistics must match channel extent", arr.shape, x.shape)
    if x.shape[0] == 0:
        raise ShapeError("batchnorm on an empty batch", x.shape)
    xd = x.data
    gd = gamma.data
    dt = xd.dtype.type

    if not training:
        inv = 1.0 / np.sqrt(moving_var.astype(xd.dtype) + dt(eps))
        xhat = (xd - moving_mean.astype(xd.dtype)) * inv
        out = xhat * gd + beta.data

        def fn_infer(g):
            gx = g * (gd * inv) if x.requires_grad else None
            return gx, _colsum((g * xhat).reshape(-1, c)), _colsum(g.reshape(-1, c))

        return _make(out, (x, gamma, beta), fn_infer, "batchnorm"), moving_mean, moving_var

    m = xd.shape[0] * xd.shape[1] * xd.shape[2]
    mu = _colsum(xd.reshape(-1, c)) / dt(m)
    xc = xd - mu
    var = _colsum((xc * xc).reshape(-1, c)) / dt(m)
    inv = 1.0 / np.sqrt(var + dt(eps))
    xhat = xc * inv
    out = xhat * gd + beta.data

    def fn(g):
        gbeta = _colsum(g.reshape(-1, c))
        ggamma = _colsum((g * xhat).reshape(-1, c))
        gx = None
        if x.requires_grad:
            gx = (gd * inv / m) * (m * g - gbeta - xhat * ggamma)
        return gx, ggamma, gbeta

    new_mean = (momentum * moving_mean + (1 - momentum) * mu).astype(moving_mean.dtype)
    new_var = (momentum * moving_var + (1 - momentum) * var).astype(moving_var.dtype)
    return _make(out, (x, gamma, beta), fn, "batchnorm"), new_mean, new_var


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""
    x = as_tensor(x)
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng stream")
    keep = rng.random(x.shape, dtype=np.float32) >= np.float32(rate)
    factor = (keep / (1.0 - rate)).astype(x.dtype)
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "dropout")
