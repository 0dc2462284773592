"""Layer primitives with explicit forward/backward passes.

Volumes use a channels-last layout ``(B, D, H, W, C)``. Every ``*_forward``
returns ``(output, cache)``; the matching ``*_backward`` consumes the cache.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NORM_EPS = 1e-5
L2_EPS = 1e-12


def _im2col(x: np.ndarray, stride: int) -> tuple[np.ndarray, tuple]:
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
    B, Do, Ho, Wo, C = win.shape[:5]
    # (B, Do, Ho, Wo, kd, kh, kw, C)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 3, 5, 6, 7, 4)).reshape(B * Do * Ho * Wo, 27 * C)
    return cols, (B, Do, Ho, Wo, C)


def conv3d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1):
    """3x3x3 convolution with zero padding 1. ``weight`` is (3, 3, 3, Cin, Cout)."""
    cols, shape = _im2col(x, stride)
    B, Do, Ho, Wo, C = shape
    cout = weight.shape[-1]
    out = cols @ weight.reshape(27 * C, cout) + bias
    return out.reshape(B, Do, Ho, Wo, cout), (cols, x.shape, stride, weight)


def conv3d_backward(dout: np.ndarray, cache, need_input_grad: bool = True,
                    need_param_grad: bool = True):
    cols, xshape, stride, weight = cache
    cin, cout = weight.shape[3], weight.shape[4]
    d2 = dout.reshape(-1, cout)
    dw = db = None
    if need_param_grad:
        dw = (cols.T @ d2).reshape(weight.shape)
        db = d2.sum(axis=0)
    if not need_input_grad:
        return None, dw, db
    B, D, H, W, _ = xshape
    Do, Ho, Wo = dout.shape[1:4]
    # one contiguous (N, Cin) slab per kernel offset keeps the scatter cache-friendly
    wk = np.ascontiguousarray(weight.reshape(27, cin, cout).transpose(0, 2, 1))
    dcols = np.matmul(d2[None], wk).reshape(27, B, Do, Ho, Wo, cin)
    dxp = np.zeros((B, D + 2, H + 2, W + 2, cin), dtype=dout.dtype)
    k = 0
    for kd in range(3):
        for kh in range(3):
            for kw in range(3):
                dxp[:, kd:kd + stride * Do:stride, kh:kh + stride * Ho:stride,
                    kw:kw + stride * Wo:stride, :] += dcols[k]
                k += 1
    return dxp[:, 1:-1, 1:-1, 1:-1, :], dw, db


def instance_norm_forward(x: np.ndarray, scale: np.ndarray, shift: np.ndarray):
    """Per-sample, per-channel normalization over the spatial axes."""
    shape = x.shape
    x3 = x.reshape(shape[0], -1, shape[-1])
    n = x3.shape[1]
    mu = np.einsum("bnc->bc", x3)[:, None, :] / n
    xc = x3 - mu
    var = np.einsum("bnc,bnc->bc", xc, xc)[:, None, :] / n
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = xc * inv
    return (xhat * scale + shift).reshape(shape), (xhat, inv, scale)


def instance_norm_backward(dout: np.ndarray, cache):
    xhat, inv, scale = cache
    shape = dout.shape
    d3 = dout.reshape(xhat.shape)
    n = xhat.shape[1]
    dshift = np.einsum("bnc->c", d3)
    dscale = np.einsum("bnc,bnc->c", d3, xhat)
    dxhat = d3 * scale
    s1 = np.einsum("bnc->bc", dxhat)[:, None, :]
    s2 = np.einsum("bnc,bnc->bc", dxhat, xhat)[:, None, :]
    dx = (inv / n) * (n * dxhat - s1 - xhat * s2)
    return dx.reshape(shape), dscale, dshift


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def global_avg_forward(x: np.ndarray):
    return x.mean(axis=(1, 2, 3)), x.shape


def global_avg_backward(dout: np.ndarray, shape) -> np.ndarray:
    n = shape[1] * shape[2] * shape[3]
    return np.broadcast_to((dout / n)[:, None, None, None, :], shape).copy()


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    return x @ weight + bias, (x, weight)


def dense_backward(dout: np.ndarray, cache):
    x, weight = cache
    return dout @ weight.T, x.T @ dout, dout.sum(axis=0)


def l2_normalize_forward(x: np.ndarray):
    n = np.sqrt((x * x).sum(axis=1, keepdims=True) + L2_EPS)
    return x / n, (x, n)


def l2_normalize_backward(dout: np.ndarray, cache) -> np.ndarray:
    x, n = cache
    return dout / n - x * ((x * dout).sum(axis=1, keepdims=True) / n ** 3)
