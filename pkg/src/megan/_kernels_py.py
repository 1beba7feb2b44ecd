"""Pure-numpy bilinear gather/scatter kernels (fallback backend).

Coordinates use the zero-padding convention: any corner of the bilinear
stencil that falls outside the ``H x W`` grid contributes zero.
"""
import numpy as np


def _stencil(py, px, H, W):
    y0f = np.floor(py)
    x0f = np.floor(px)
    ly = py - y0f
    lx = px - x0f
    y0 = y0f.astype(np.int64)
    x0 = x0f.astype(np.int64)
    hy = 1.0 - ly
    hx = 1.0 - lx
    corners = []
    for dy, dx, wgt in ((0, 0, hy * hx), (0, 1, hy * lx), (1, 0, ly * hx), (1, 1, ly * lx)):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        idx = np.clip(yy, 0, H - 1) * W + np.clip(xx, 0, W - 1)
        corners.append((idx, valid, wgt))
    return corners, ly, lx


def _corner_values(xf, idx, valid):
    # xf: N,C,HW ; idx, valid: N,P
    vals = np.take_along_axis(xf, idx[:, None, :], axis=2)
    return np.where(valid[:, None, :], vals, 0.0)


def bilinear_gather(x, py, px):
    """Sample ``x[N,C,H,W]`` at fractional ``(py, px)`` of shape ``N x P``.

    Returns an ``N x C x P`` array.
    """
    N, C, H, W = x.shape
    xf = x.reshape(N, C, H * W)
    corners, _, _ = _stencil(py, px, H, W)
    out = np.zeros((N, C, py.shape[1]))
    for idx, valid, wgt in corners:
        out += _corner_values(xf, idx, valid) * wgt[:, None, :]
    return out


def bilinear_scatter(dvals, x, py, px):
    """Adjoint of :func:`bilinear_gather`.

    Returns ``(dx, dpy, dpx)`` given the cotangent ``dvals[N,C,P]``.
    """
    N, C, H, W = x.shape
    P = py.shape[1]
    HW = H * W
    xf = x.reshape(N, C, HW)
    corners, ly, lx = _stencil(py, px, H, W)
    v00, v01, v10, v11 = (_corner_values(xf, idx, valid) for idx, valid, _ in corners)
    hy = (1.0 - ly)[:, None, :]
    hx = (1.0 - lx)[:, None, :]
    lyb = ly[:, None, :]
    lxb = lx[:, None, :]
    gy = hx * (v10 - v00) + lxb * (v11 - v01)
    gx = hy * (v01 - v00) + lyb * (v11 - v10)
    dpy = (dvals * gy).sum(axis=1)
    dpx = (dvals * gx).sum(axis=1)

    idx = np.stack([c[0] for c in corners], axis=-1)  # N,P,4
    wgt = np.stack([np.where(c[1], c[2], 0.0) for c in corners], axis=-1)
    base = (np.arange(N * C, dtype=np.int64) * HW).reshape(N, C, 1, 1)
    flat_idx = (base + idx[:, None, :, :]).ravel()
    contrib = (dvals[..., None] * wgt[:, None, :, :]).ravel()
    dx = np.bincount(flat_idx, weights=contrib, minlength=N * C * HW)
    return dx.reshape(N, C, H, W), dpy, dpx
