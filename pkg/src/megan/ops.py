"""Primitive differentiable operations.

Every primitive comes as a ``*_forward`` returning ``(out, cache)`` and a
``*_backward`` mapping the output cotangent and cache to input cotangents.
Convenience wrappers without the cache are provided for inference code.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels, kinks
from .tensor import ConvSpec, ShapeError, check_dim, check_rank

LRELU_SLOPE = 0.1


# -- convolution --------------------------------------------------------------

def conv2d_forward(x, w, b=None, stride=1, pad=0):
    """Cross-correlation with symmetric zero padding.

    Args:
        x: input ``N x Cin x H x W``.
        w: weights ``Cout x Cin x kh x kw``.
        b: optional bias ``Cout``.
    """
    check_rank("conv2d input", x, 4)
    check_rank("conv2d weight", w, 4)
    N, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    check_dim("conv2d input channels (dim 1)", C, Cw)
    if b is not None:
        check_dim("conv2d bias length", b.shape[0], O)
    Ho, Wo = ConvSpec(kh, kw, stride, pad).out_size(H, W)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(N, C * kh * kw, Ho * Wo)
    out = np.matmul(w.reshape(O, -1), cols)
    if b is not None:
        out += b[None, :, None]
    cache = (x.shape, w, cols, stride, pad, b is not None)
    return out.reshape(N, O, Ho, Wo), cache


def conv2d_backward(dout, cache):
    xshape, w, cols, stride, pad, has_bias = cache
    N, C, H, W = xshape
    O, _, kh, kw = w.shape
    Ho, Wo = dout.shape[2:]
    d2 = dout.reshape(N, O, Ho * Wo)
    dw = np.matmul(d2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3)) if has_bias else None
    dcols = np.matmul(w.reshape(O, -1).T, d2).reshape(N, C, kh, kw, Ho, Wo)
    dxp = np.zeros((N, C, H + 2 * pad, W + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += dcols[:, :, i, j]
    dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


def conv2d(x, w, b=None, spec: ConvSpec | None = None):
    if spec is not None:
        check_dim("kernel height", w.shape[2], spec.kernel_h)
        check_dim("kernel width", w.shape[3], spec.kernel_w)
        return conv2d_forward(x, w, b, spec.stride, spec.pad)[0]
    return conv2d_forward(x, w, b)[0]


# -- activations --------------------------------------------------------------

def leaky_relu_forward(x, slope=LRELU_SLOPE):
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    pos = x >= 0
    kinks.record(pos)
    return np.where(pos, x, slope * x), (pos, slope)


def leaky_relu_backward(dout, cache):
    pos, slope = cache
    return np.where(pos, dout, slope * dout)


def leaky_relu(x, slope=LRELU_SLOPE):
    return leaky_relu_forward(x, slope)[0]


def sigmoid_forward(x):
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return y, y


def sigmoid_backward(dout, y):
    return dout * y * (1.0 - y)


def sigmoid(x):
    return sigmoid_forward(x)[0]


def tanh_forward(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(dout, y):
    return dout * (1.0 - y * y)


def softmax_forward(x, axis=-1):
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for rank {x.ndim}")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return y, (y, axis)


def softmax_backward(dout, cache):
    y, axis = cache
    return y * (dout - (dout * y).sum(axis=axis, keepdims=True))


def softmax(x, axis=-1):
    return softmax_forward(x, axis)[0]


# -- sampling -----------------------------------------------------------------

def bilinear_sample_forward(f, px, py):
    """Bilinearly sample a ``C x H x W`` map at column ``px``, row ``py``."""
    check_rank("bilinear_sample input", f, 3)
    x = f[None]
    pyv = np.array([[py]], dtype=np.float64)
    pxv = np.array([[px]], dtype=np.float64)
    out = kernels.bilinear_gather(x, pyv, pxv)[0, :, 0]
    return out, (x, pyv, pxv)


def bilinear_sample_backward(dout, cache):
    """Returns ``(df, dpx, dpy)``."""
    x, pyv, pxv = cache
    dx, dpy, dpx = kernels.bilinear_scatter(dout[None, :, None], x, pyv, pxv)
    return dx[0], float(dpx[0, 0]), float(dpy[0, 0])


def bilinear_sample(f, px, py):
    return bilinear_sample_forward(f, px, py)[0]


# -- pixel shuffle ------------------------------------------------------------

def pixel_shuffle(x, r):
    """``N x C*r*r x H x W`` -> ``N x C x rH x rW``."""
    check_rank("pixel_shuffle input", x, 4)
    N, Cr, H, W = x.shape
    if Cr % (r * r):
        raise ShapeError(f"pixel_shuffle channels {Cr} not divisible by r^2 = {r * r}")
    C = Cr // (r * r)
    return x.reshape(N, C, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(N, C, H * r, W * r)


def pixel_unshuffle(x, r):
    check_rank("pixel_unshuffle input", x, 4)
    N, C, Hr, Wr = x.shape
    if Hr % r or Wr % r:
        raise ShapeError(f"pixel_unshuffle spatial dims {Hr}x{Wr} not divisible by {r}")
    H, W = Hr // r, Wr // r
    return x.reshape(N, C, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(N, C * r * r, H, W)


def pixel_shuffle_forward(x, r):
    return pixel_shuffle(x, r), r


def pixel_shuffle_backward(dout, r):
    return pixel_unshuffle(dout, r)
