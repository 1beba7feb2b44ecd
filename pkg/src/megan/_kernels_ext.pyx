# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled bilinear gather/scatter kernels.

Same contract and floating-point evaluation order as ``_kernels_py``.
"""
import numpy as np
from libc.math cimport floor


cdef inline void _stencil(double py, double px, Py_ssize_t H, Py_ssize_t W,
                          Py_ssize_t* idx, double* wgt, double* ly_out, double* lx_out) noexcept nogil:
    cdef double y0f = floor(py)
    cdef double x0f = floor(px)
    cdef double ly = py - y0f
    cdef double lx = px - x0f
    cdef double hy = 1.0 - ly
    cdef double hx = 1.0 - lx
    cdef Py_ssize_t y0 = <Py_ssize_t>y0f
    cdef Py_ssize_t x0 = <Py_ssize_t>x0f
    cdef Py_ssize_t k, yy, xx
    cdef double w[4]
    w[0] = hy * hx
    w[1] = hy * lx
    w[2] = ly * hx
    w[3] = ly * lx
    for k in range(4):
        yy = y0 + (k >> 1)
        xx = x0 + (k & 1)
        if 0 <= yy < H and 0 <= xx < W:
            idx[k] = yy * W + xx
            wgt[k] = w[k]
        else:
            idx[k] = -1
            wgt[k] = w[k]
    ly_out[0] = ly
    lx_out[0] = lx


def bilinear_gather(double[:, :, :, ::1] x, double[:, ::1] py, double[:, ::1] px):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t P = py.shape[1]
    out_arr = np.zeros((N, C, P))
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, ::1] xf = np.asarray(x).reshape(N, C, H * W)
    cdef Py_ssize_t n, p, c, k
    cdef Py_ssize_t idx[4]
    cdef double wgt[4]
    cdef double ly, lx, acc, v
    with nogil:
        for n in range(N):
            for p in range(P):
                _stencil(py[n, p], px[n, p], H, W, idx, wgt, &ly, &lx)
                for c in range(C):
                    acc = 0.0
                    for k in range(4):
                        v = xf[n, c, idx[k]] if idx[k] >= 0 else 0.0
                        acc = acc + v * wgt[k]
                    out[n, c, p] = acc
    return out_arr


def bilinear_scatter(double[:, :, ::1] dvals, double[:, :, :, ::1] x,
                     double[:, ::1] py, double[:, ::1] px):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t P = py.shape[1]
    dx_arr = np.zeros((N, C, H * W))
    dpy_arr = np.zeros((N, P))
    dpx_arr = np.zeros((N, P))
    cdef double[:, :, ::1] dx = dx_arr
    cdef double[:, ::1] dpy = dpy_arr
    cdef double[:, ::1] dpx = dpx_arr
    cdef double[:, :, ::1] xf = np.asarray(x).reshape(N, C, H * W)
    cdef Py_ssize_t n, p, c, k
    cdef Py_ssize_t idx[4]
    cdef double wgt[4]
    cdef double v[4]
    cdef double ly, lx, hy, hx, g, sy, sx
    with nogil:
        for n in range(N):
            for p in range(P):
                _stencil(py[n, p], px[n, p], H, W, idx, wgt, &ly, &lx)
                hy = 1.0 - ly
                hx = 1.0 - lx
                sy = 0.0
                sx = 0.0
                for c in range(C):
                    g = dvals[n, c, p]
                    for k in range(4):
                        v[k] = xf[n, c, idx[k]] if idx[k] >= 0 else 0.0
                    sy = sy + g * (hx * (v[2] - v[0]) + lx * (v[3] - v[1]))
                    sx = sx + g * (hy * (v[1] - v[0]) + ly * (v[3] - v[2]))
                dpy[n, p] = sy
                dpx[n, p] = sx
        for n in range(N):
            for c in range(C):
                for p in range(P):
                    _stencil(py[n, p], px[n, p], H, W, idx, wgt, &ly, &lx)
                    g = dvals[n, c, p]
                    for k in range(4):
                        if idx[k] >= 0:
                            dx[n, c, idx[k]] += g * wgt[k]
    return dx_arr.reshape(N, C, H, W), dpy_arr, dpx_arr
