"""Learned building blocks with hand-written backward passes.

Parameters live in a flat ``dict`` mapping dotted names to arrays; every block
takes that dict plus its name prefix. ``*_forward`` returns ``(out, cache)``
and ``*_backward(dout, cache, grads)`` accumulates parameter cotangents into
``grads`` (same keys) and returns the input cotangents.
"""
from __future__ import annotations

import zlib

import numpy as np

from . import kernels, ops
from .tensor import ShapeError, check_dim, check_rank

TAPS = 9
OFFSET_CHANNELS = 2 * TAPS
_TAP_Y = np.repeat(np.arange(-1, 2), 3).astype(np.float64)
_TAP_X = np.tile(np.arange(-1, 2), 3).astype(np.float64)


# He-uniform gain for LeakyReLU(0.1): keeps activation scale through depth
INIT_GAIN = float(np.sqrt(2.0 / (1.0 + ops.LRELU_SLOPE ** 2)))


def accumulate(grads: dict, key: str, value) -> None:
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = np.array(value, dtype=np.float64)


# -- parameter initialisation -------------------------------------------------

def param_rng(seed: int, name: str) -> np.random.Generator:
    """Per-tensor generator, so a tensor's init does not depend on which others exist."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def init_conv(P, name, cin, cout, k=3, seed=0, bias=True, zero=False, gain=INIT_GAIN):
    if zero:
        P[name + ".w"] = np.zeros((cout, cin, k, k))
    else:
        bound = gain * np.sqrt(3.0 / (cin * k * k))
        P[name + ".w"] = param_rng(seed, name + ".w").uniform(-bound, bound, (cout, cin, k, k))
    if bias:
        P[name + ".b"] = np.zeros(cout)


def init_nonlocal(P, name, C, seed=0):
    if C % 2:
        raise ShapeError(f"non-local block needs an even channel count, got {C}")
    E = C // 2
    for part, cin, cout in (("u", C, E), ("v", C, E), ("g", C, E), ("z", E, C)):
        init_conv(P, f"{name}.{part}", cin, cout, k=1, seed=seed, bias=False)


def init_offset_net(P, name, C, seed=0, modulated=False):
    init_conv(P, name + ".c1", 2 * C, C, seed=seed)
    init_conv(P, name + ".c2", C, OFFSET_CHANNELS + (TAPS if modulated else 0), seed=seed, zero=True)


def init_interpolation(P, name, C, seed=0, modulated=False):
    for side in ("1", "3"):
        init_offset_net(P, f"{name}.g{side}", C, seed, modulated)
        init_conv(P, f"{name}.d{side}", C, C, seed=seed)
        init_conv(P, f"{name}.c{side}", C, C, k=1, seed=seed, bias=False)


def init_convlstm(P, name, C, seed=0, modulated=False):
    for state in ("h", "c"):
        init_offset_net(P, f"{name}.g{state}", C, seed, modulated)
        init_conv(P, f"{name}.d{state}", C, C, seed=seed)
    init_conv(P, name + ".wx", C, 4 * C, seed=seed)
    init_conv(P, name + ".wh", C, 4 * C, seed=seed, bias=False)


def init_bidirectional(P, name, C, seed=0, modulated=False):
    init_convlstm(P, name + ".fwd", C, seed, modulated)
    init_convlstm(P, name + ".bwd", C, seed, modulated)
    init_conv(P, name + ".fuse_f", C, C, k=1, seed=seed, bias=False)
    init_conv(P, name + ".fuse_b", C, C, k=1, seed=seed, bias=False)
    P[name + ".fuse.b"] = np.zeros(C)


def init_resblock(P, name, C, seed=0):
    init_conv(P, name + ".c1", C, C, seed=seed)
    init_conv(P, name + ".c2", C, C, seed=seed)


def init_pfrdb(P, name, C, T, seed=0):
    init_conv(P, name + ".a", C, C, seed=seed)
    init_conv(P, name + ".b", 2 * C, C, seed=seed)
    init_conv(P, name + ".dist", T * C, C, k=1, seed=seed)
    init_conv(P, name + ".fuse", 2 * C, C, seed=seed)


# -- named convolution --------------------------------------------------------

def conv_forward(x, P, name, pad=None):
    w = P[name + ".w"]
    if pad is None:
        pad = w.shape[2] // 2
    out, c = ops.conv2d_forward(x, w, P.get(name + ".b"), 1, pad)
    return out, (name, c)


def conv_backward(dout, cache, G):
    name, c = cache
    dx, dw, db = ops.conv2d_backward(dout, c)
    accumulate(G, name + ".w", dw)
    if db is not None:
        accumulate(G, name + ".b", db)
    return dx


def conv_lrelu_forward(x, P, name):
    y, c1 = conv_forward(x, P, name)
    z, c2 = ops.leaky_relu_forward(y)
    return z, (c1, c2)


def conv_lrelu_backward(dout, cache, G):
    c1, c2 = cache
    return conv_backward(ops.leaky_relu_backward(dout, c2), c1, G)


# -- non-local attention ------------------------------------------------------

def _nonlocal_scores(x, P, name):
    u, cu = conv_forward(x, P, name + ".u")
    v, cv = conv_forward(x, P, name + ".v")
    N, E, H, W = u.shape
    U = u.reshape(N, E, H * W)
    V = v.reshape(N, E, H * W)
    return U, V, np.matmul(U.transpose(0, 2, 1), V), (cu, cv)


def _normalize(S, normalize):
    if normalize == "softmax":
        return ops.softmax_forward(S, axis=-1)
    if normalize == "sum":
        d = S.sum(axis=-1, keepdims=True)
        return S / d, (S, d)
    raise ValueError(f"unknown attention normalisation {normalize!r}")


def nonlocal_attention(x, P, name="nl", normalize="softmax"):
    """Attention matrix ``N x HW x HW`` (rows index output sites)."""
    _, _, S, _ = _nonlocal_scores(x, P, name)
    return _normalize(S, normalize)[0]


def nonlocal_forward(x, P, name="nl", normalize="softmax"):
    """Residual non-local block ``z = W_z y + x`` with dot-product scores."""
    check_rank("non-local input", x, 4)
    if x.shape[1] % 2:
        raise ShapeError(f"non-local block needs an even channel count, got {x.shape[1]}")
    N, C, H, W = x.shape
    U, V, S, (cu, cv) = _nonlocal_scores(x, P, name)
    A, ca = _normalize(S, normalize)
    g, cg = conv_forward(x, P, name + ".g")
    G = g.reshape(N, -1, H * W)
    Y = np.matmul(G, A.transpose(0, 2, 1))
    z, cz = conv_forward(Y.reshape(N, -1, H, W), P, name + ".z")
    return z + x, (U, V, G, A, ca, normalize, cu, cv, cg, cz)


def nonlocal_backward(dout, cache, grads):
    U, V, G, A, ca, normalize, cu, cv, cg, cz = cache
    N, C, H, W = dout.shape
    dY = conv_backward(dout, cz, grads).reshape(N, -1, H * W)
    dA = np.matmul(dY.transpose(0, 2, 1), G)
    dG = np.matmul(dY, A)
    if normalize == "softmax":
        dS = ops.softmax_backward(dA, ca)
    else:
        S, d = ca
        dS = dA / d - (dA * S).sum(axis=-1, keepdims=True) / (d * d)
    dU = np.matmul(V, dS.transpose(0, 2, 1))
    dV = np.matmul(U, dS)
    dx = dout.copy()
    dx += conv_backward(dU.reshape(N, -1, H, W), cu, grads)
    dx += conv_backward(dV.reshape(N, -1, H, W), cv, grads)
    dx += conv_backward(dG.reshape(N, -1, H, W), cg, grads)
    return dx


# -- deformable convolution ---------------------------------------------------

def deform_conv2d_forward(x, offsets, mask, weight, bias=None):
    """3x3 deformable convolution, stride 1, zero padding via the sampler.

    ``offsets`` holds ``(dy, dx)`` for tap ``k`` in channels ``2k, 2k+1``
    with taps row-major over the 3x3 grid. ``mask`` holds 9 modulation
    logits (sigmoid applied here) or is ``None``.
    """
    check_rank("deform_conv2d input", x, 4)
    N, C, H, W = x.shape
    check_dim("deform_conv2d offset channels", offsets.shape[1], OFFSET_CHANNELS)
    if offsets.shape[0] != N or offsets.shape[2:] != (H, W):
        raise ShapeError(f"offsets shape {offsets.shape} incompatible with input {x.shape}")
    if mask is not None:
        check_dim("deform_conv2d mask channels", mask.shape[1], TAPS)
    O = weight.shape[0]
    if weight.shape[1:] != (C, 3, 3):
        raise ShapeError(f"deform_conv2d weight shape {weight.shape}, expected ({O}, {C}, 3, 3)")
    off = offsets.reshape(N, TAPS, 2, H, W)
    base_y = np.arange(H, dtype=np.float64)[None, None, :, None] + _TAP_Y[None, :, None, None]
    base_x = np.arange(W, dtype=np.float64)[None, None, None, :] + _TAP_X[None, :, None, None]
    py = (base_y + off[:, :, 0]).reshape(N, -1)
    px = (base_x + off[:, :, 1]).reshape(N, -1)
    vals = kernels.bilinear_gather(x, py, px).reshape(N, C, TAPS, H * W)
    if mask is not None:
        m = ops.sigmoid(mask).reshape(N, 1, TAPS, H * W)
        cols = vals * m
    else:
        m = None
        cols = vals
    cols = cols.reshape(N, C * TAPS, H * W)
    out = np.matmul(weight.reshape(O, -1), cols)
    if bias is not None:
        out += bias[None, :, None]
    cache = (x, py, px, vals, m, cols, weight, bias is not None)
    return out.reshape(N, O, H, W), cache


def deform_conv2d_backward(dout, cache):
    """Returns ``(dx, doffsets, dmask, dweight, dbias)``."""
    x, py, px, vals, m, cols, weight, has_bias = cache
    N, C, H, W = x.shape
    O = weight.shape[0]
    d2 = dout.reshape(N, O, H * W)
    dweight = np.matmul(d2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
    dbias = dout.sum(axis=(0, 2, 3)) if has_bias else None
    dcols = np.matmul(weight.reshape(O, -1).T, d2).reshape(N, C, TAPS, H * W)
    if m is not None:
        dvals = dcols * m
        dm = (dcols * vals).sum(axis=1)
        dmask = (dm * m[:, 0] * (1.0 - m[:, 0])).reshape(N, TAPS, H, W)
    else:
        dvals = dcols
        dmask = None
    dx, dpy, dpx = kernels.bilinear_scatter(dvals.reshape(N, C, -1), x, py, px)
    doff = np.stack([dpy.reshape(N, TAPS, H, W), dpx.reshape(N, TAPS, H, W)], axis=2)
    return dx, doff.reshape(N, OFFSET_CHANNELS, H, W), dmask, dweight, dbias


def deform_conv2d(x, offsets, mask, weight, bias=None):
    return deform_conv2d_forward(x, offsets, mask, weight, bias)[0]


def dconv_forward(x, offsets_and_mask, P, name):
    """Named deformable conv; extra channels past the 18 offsets are mask logits."""
    offsets = offsets_and_mask[:, :OFFSET_CHANNELS]
    mask = offsets_and_mask[:, OFFSET_CHANNELS:] if offsets_and_mask.shape[1] > OFFSET_CHANNELS else None
    out, c = deform_conv2d_forward(x, offsets, mask, P[name + ".w"], P.get(name + ".b"))
    return out, (name, c)


def dconv_backward(dout, cache, G):
    name, c = cache
    dx, doff, dmask, dw, db = deform_conv2d_backward(dout, c)
    accumulate(G, name + ".w", dw)
    if db is not None:
        accumulate(G, name + ".b", db)
    if dmask is not None:
        doff = np.concatenate([doff, dmask], axis=1)
    return dx, doff


def offset_net_forward(x, P, name):
    h, c1 = conv_lrelu_forward(x, P, name + ".c1")
    out, c2 = conv_forward(h, P, name + ".c2")
    return out, (c1, c2)


def offset_net_backward(dout, cache, G):
    c1, c2 = cache
    return conv_lrelu_backward(conv_backward(dout, c2, G), c1, G)


def aligned_sample_forward(x, guide, P, offnet, dconv):
    """Predict offsets from ``[x, guide]`` and deformably resample ``x``."""
    off, co = offset_net_forward(np.concatenate([x, guide], axis=1), P, offnet)
    y, cd = dconv_forward(x, off, P, dconv)
    return y, (co, cd, x.shape[1])


def aligned_sample_backward(dout, cache, G):
    """Returns ``(dx, dguide)``."""
    co, cd, C = cache
    dx, doff = dconv_backward(dout, cd, G)
    dcat = offset_net_backward(doff, co, G)
    return dx + dcat[:, :C], dcat[:, C:]


# -- frame feature temporal interpolation -------------------------------------

def feature_interpolate_forward(F1, F3, P, name="interp"):
    """Synthesise the in-between feature map of ``F1`` and ``F3``."""
    if F1.shape != F3.shape:
        raise ShapeError(f"interpolation inputs differ: {F1.shape} vs {F3.shape}")
    A1, ca1 = aligned_sample_forward(F1, F3, P, name + ".g1", name + ".d1")
    A3, ca3 = aligned_sample_forward(F3, F1, P, name + ".g3", name + ".d3")
    B1, cb1 = conv_forward(A1, P, name + ".c1")
    B3, cb3 = conv_forward(A3, P, name + ".c3")
    return B1 + B3, (ca1, ca3, cb1, cb3)


def feature_interpolate_backward(dout, cache, G):
    ca1, ca3, cb1, cb3 = cache
    dF1, dF3_from1 = aligned_sample_backward(conv_backward(dout, cb1, G), ca1, G)
    dF3, dF1_from3 = aligned_sample_backward(conv_backward(dout, cb3, G), ca3, G)
    return dF1 + dF1_from3, dF3 + dF3_from1


# -- deformable ConvLSTM ------------------------------------------------------

def dconvlstm_step_forward(h_prev, c_prev, F, P, name):
    """One deformable ConvLSTM step; returns ``((h, c), cache)``.

    Gate convolutions are stored stacked along the output channels in the
    order input, forget, output, candidate: ``wx`` (with bias) acts on the
    frame feature and ``wh`` on the aligned hidden state.
    """
    if not (h_prev.shape == c_prev.shape == F.shape):
        raise ShapeError(f"ConvLSTM shapes differ: h {h_prev.shape}, c {c_prev.shape}, F {F.shape}")
    C = F.shape[1]
    h_al, cah = aligned_sample_forward(h_prev, F, P, name + ".gh", name + ".dh")
    c_al, cac = aligned_sample_forward(c_prev, F, P, name + ".gc", name + ".dc")
    gx, cwx = conv_forward(F, P, name + ".wx")
    gh, cwh = conv_forward(h_al, P, name + ".wh")
    z = gx + gh
    i = ops.sigmoid(z[:, :C])
    f = ops.sigmoid(z[:, C:2 * C])
    o = ops.sigmoid(z[:, 2 * C:3 * C])
    g = np.tanh(z[:, 3 * C:])
    c = f * c_al + i * g
    tc = np.tanh(c)
    h = o * tc
    return (h, c), (cah, cac, cwx, cwh, i, f, o, g, c_al, tc)


def dconvlstm_step_backward(dh, dc, cache, G):
    """Returns ``(dh_prev, dc_prev, dF)``."""
    cah, cac, cwx, cwh, i, f, o, g, c_al, tc = cache
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate([
        dc * g * i * (1.0 - i),
        dc * c_al * f * (1.0 - f),
        dh * tc * o * (1.0 - o),
        dc * i * (1.0 - g * g),
    ], axis=1)
    dF = conv_backward(dz, cwx, G)
    dh_al = conv_backward(dz, cwh, G)
    dh_prev, dF_h = aligned_sample_backward(dh_al, cah, G)
    dc_prev, dF_c = aligned_sample_backward(dc * f, cac, G)
    return dh_prev, dc_prev, dF + dF_h + dF_c


def bidirectional_forward(feats, P, name="bi"):
    """Bidirectional deformable ConvLSTM over ``T x N x C x H x W`` features.

    Per frame the two hidden states are merged as
    ``(W_f h_fwd + W_b h_bwd) + b``.
    """
    check_rank("bidirectional input", feats, 5)
    T = feats.shape[0]
    if T < 1:
        raise ShapeError("bidirectional pass needs at least one frame")
    zero = np.zeros_like(feats[0])
    hf, cf_caches = [], []
    h, c = zero, zero
    for t in range(T):
        (h, c), ct = dconvlstm_step_forward(h, c, feats[t], P, name + ".fwd")
        hf.append(h)
        cf_caches.append(ct)
    hb = [None] * T
    cb_caches = [None] * T
    h, c = zero, zero
    for t in reversed(range(T)):
        (h, c), ct = dconvlstm_step_forward(h, c, feats[t], P, name + ".bwd")
        hb[t] = h
        cb_caches[t] = ct
    shape = feats.shape
    flat = (T * shape[1],) + shape[2:]
    yf, cyf = conv_forward(np.stack(hf).reshape(flat), P, name + ".fuse_f")
    yb, cyb = conv_forward(np.stack(hb).reshape(flat), P, name + ".fuse_b")
    out = (yf + yb) + P[name + ".fuse.b"][None, :, None, None]
    return out.reshape(shape), (cf_caches, cb_caches, cyf, cyb, name)


def bidirectional_backward(dout, cache, G):
    cf_caches, cb_caches, cyf, cyb, name = cache
    T = dout.shape[0]
    flat = dout.reshape((-1,) + dout.shape[2:])
    accumulate(G, name + ".fuse.b", flat.sum(axis=(0, 2, 3)))
    dhf = conv_backward(flat, cyf, G).reshape(dout.shape)
    dhb = conv_backward(flat, cyb, G).reshape(dout.shape)
    dfeats = np.zeros(dout.shape)
    dh = np.zeros(dout.shape[1:])
    dc = np.zeros(dout.shape[1:])
    for t in reversed(range(T)):
        dh, dc, dF = dconvlstm_step_backward(dh + dhf[t], dc, cf_caches[t], G)
        dfeats[t] += dF
    dh = np.zeros(dout.shape[1:])
    dc = np.zeros(dout.shape[1:])
    for t in range(T):
        dh, dc, dF = dconvlstm_step_backward(dh + dhb[t], dc, cb_caches[t], G)
        dfeats[t] += dF
    return dfeats


# -- reconstruction blocks ----------------------------------------------------

def resblock_forward(x, P, name):
    y, c1 = conv_lrelu_forward(x, P, name + ".c1")
    z, c2 = conv_forward(y, P, name + ".c2")
    return x + z, (c1, c2)


def resblock_backward(dout, cache, G):
    c1, c2 = cache
    return dout + conv_lrelu_backward(conv_backward(dout, c2, G), c1, G)


def pfrdb_forward(frames, P, name):
    """Progressive fusion residual dense block over ``T x N x C x H x W`` streams."""
    check_rank("PFRDB input", frames, 5)
    T, N, C, H, W = frames.shape
    if T < 1:
        raise ShapeError("PFRDB needs at least one frame stream")
    check_dim("PFRDB distillation input channels", P[name + ".dist.w"].shape[1], T * C)
    X = frames.reshape(T * N, C, H, W)
    a, ca = conv_lrelu_forward(X, P, name + ".a")
    s, cb = conv_lrelu_forward(np.concatenate([X, a], axis=1), P, name + ".b")
    S = s.reshape(T, N, C, H, W).transpose(1, 0, 2, 3, 4).reshape(N, T * C, H, W)
    D, cd = conv_lrelu_forward(S, P, name + ".dist")
    Db = np.broadcast_to(D[None], (T, N, C, H, W)).reshape(T * N, C, H, W)
    y, cf = conv_forward(np.concatenate([s, Db], axis=1), P, name + ".fuse")
    return frames + y.reshape(frames.shape), (ca, cb, cd, cf, frames.shape)


def pfrdb_backward(dout, cache, G):
    ca, cb, cd, cf, shape = cache
    T, N, C, H, W = shape
    dcat = conv_backward(dout.reshape(T * N, C, H, W), cf, G)
    ds = dcat[:, :C]
    dD = dcat[:, C:].reshape(T, N, C, H, W).sum(axis=0)
    dS = conv_lrelu_backward(dD, cd, G)
    ds = ds + dS.reshape(N, T, C, H, W).transpose(1, 0, 2, 3, 4).reshape(T * N, C, H, W)
    dxa = conv_lrelu_backward(ds, cb, G)
    dX = dxa[:, :C] + conv_lrelu_backward(dxa[:, C:], ca, G)
    return dout + dX.reshape(shape)
