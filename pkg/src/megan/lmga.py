"""Long-range memory graph aggregation (LMGA).

One small fully connected graph is built per key frame: node 0 is the key
frame's own feature and nodes ``1..tau`` come from a global pool sampled
once per forward pass. Edge logits come from a small conv net applied to
absolute feature differences, rows are softmax-normalised over neighbours
(no self loops), and ``K`` graph-convolution layers propagate messages. The
key node's final embedding is refined by two convolutions and added back to
the input feature.

Batched graph tensors are laid out ``G x phi x N x C x H x W`` (graphs,
nodes, batch, channels, rows, cols); adjacency is ``G x N x phi x phi``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kinks, ops
from .blocks import (conv_backward, conv_forward, conv_lrelu_backward,
                     conv_lrelu_forward, init_conv)
from .tensor import MeganError, ShapeError, check_rank

ROW_SUM_TOL = 1e-6


@dataclass
class MemoryPool:
    local: np.ndarray
    global_: np.ndarray
    global_indices: tuple[int, ...]
    seed: int


@dataclass
class GraphState:
    nodes: np.ndarray
    adjacency: np.ndarray

    @property
    def phi(self) -> int:
        return self.nodes.shape[0]

    @property
    def num_edges(self) -> int:
        return self.phi * (self.phi - 1)


def init_lmga(P, name, C, K, seed=0):
    for i in (1, 2, 3):
        init_conv(P, f"{name}.ng.c{i}", C, C, seed=seed)
    init_conv(P, f"{name}.edge.e1", C, max(C // 2, 1), seed=seed)
    init_conv(P, f"{name}.edge.e2", max(C // 2, 1), 1, seed=seed)
    for k in range(K):
        init_conv(P, f"{name}.gcn{k}", C, C, seed=seed, bias=False)
    init_conv(P, f"{name}.refine.r1", C, C, seed=seed)
    init_conv(P, f"{name}.refine.r2", C, C, seed=seed)


def sample_global_indices(num_frames: int, tau: int, seed: int) -> tuple[int, ...]:
    """Shuffle ``0..num_frames-1`` and keep the first ``tau`` (0-based)."""
    if tau < 0 or tau > num_frames:
        raise MeganError(f"tau={tau} must lie in [0, {num_frames}]")
    perm = np.random.default_rng(seed).permutation(num_frames)
    return tuple(int(i) for i in perm[:tau])


def build_pools(features, tau: int, seed: int) -> MemoryPool:
    """Local pool = every frame; global pool = ``tau`` frames drawn without replacement.

    ``global_indices`` are reported 1-based.
    """
    features = np.asarray(features)
    idx = sample_global_indices(features.shape[0], tau, seed)
    return MemoryPool(features, features[list(idx)], tuple(i + 1 for i in idx), seed)


# -- N_g: shared per-node encoder ---------------------------------------------

def ng_forward(x, P, name):
    h1, c1 = conv_lrelu_forward(x, P, name + ".ng.c1")
    h2, c2 = conv_lrelu_forward(h1, P, name + ".ng.c2")
    out, c3 = conv_forward(h2, P, name + ".ng.c3")
    return out, (c1, c2, c3)


def ng_backward(dout, cache, G):
    c1, c2, c3 = cache
    d = conv_backward(dout, c3, G)
    d = conv_lrelu_backward(d, c2, G)
    return conv_lrelu_backward(d, c1, G)


def aggregate(pool: MemoryPool, key_index: int, P, name="lmga"):
    """Encoded node set for one key frame (``key_index`` 1-based)."""
    T = pool.local.shape[0]
    if not 1 <= key_index <= T:
        raise MeganError(f"key_index {key_index} outside 1..{T}")
    raw = np.concatenate([pool.local[key_index - 1][None], pool.global_], axis=0)
    phi = raw.shape[0]
    flat = raw.reshape((-1,) + raw.shape[2:])
    enc, _ = ng_forward(flat, P, name)
    return enc.reshape(raw.shape[:2] + enc.shape[1:]) if phi else enc


# -- edge weights -------------------------------------------------------------

def _pairs(phi):
    return [(p, q) for p in range(phi) for q in range(p + 1, phi)]


def edge_logits_forward(nodes, P, name):
    """Symmetric edge logits ``G x N x phi x phi`` (diagonal unused)."""
    Gn, phi, N = nodes.shape[:3]
    pairs = _pairs(phi)
    L = np.zeros((Gn, N, phi, phi))
    if not pairs:
        return L, None
    pi = np.array([p for p, _ in pairs])
    qi = np.array([q for _, q in pairs])
    diff = nodes[:, pi] - nodes[:, qi]
    # a key frame drawn into its own global pool gives an exact-zero difference that
    # stays zero under any perturbation; roundoff around it is not a branch change
    band = 1e-12 * max(1.0, float(np.abs(nodes).max()))
    kinks.record(np.where(np.abs(diff) <= band, 0.0, np.sign(diff)))
    x = np.abs(diff).reshape((-1,) + nodes.shape[3:])
    h, c1 = conv_lrelu_forward(x, P, name + ".edge.e1")
    s, c2 = conv_forward(h, P, name + ".edge.e2")
    logits = s.mean(axis=(1, 2, 3)).reshape(Gn, len(pairs), N).transpose(0, 2, 1)
    L[:, :, pi, qi] = logits
    L[:, :, qi, pi] = logits
    return L, (pi, qi, np.sign(diff), s.shape, c1, c2, nodes.shape)


def edge_logits_backward(dL, cache, G):
    if cache is None:
        return None
    pi, qi, sgn, sshape, c1, c2, nshape = cache
    Gn, phi, N = nshape[:3]
    dlog = (dL[:, :, pi, qi] + dL[:, :, qi, pi]).transpose(0, 2, 1).reshape(-1)
    ds = np.broadcast_to((dlog / (sshape[2] * sshape[3]))[:, None, None, None], sshape)
    dx = conv_lrelu_backward(conv_backward(ds, c2, G), c1, G)
    ddiff = dx.reshape(sgn.shape) * sgn
    dnodes = np.zeros(nshape)
    for j, (p, q) in enumerate(zip(pi, qi)):
        dnodes[:, p] += ddiff[:, j]
        dnodes[:, q] -= ddiff[:, j]
    return dnodes


def row_softmax_offdiag_forward(L):
    phi = L.shape[-1]
    if phi < 2:
        return np.zeros_like(L), None
    masked = np.where(np.eye(phi, dtype=bool), -np.inf, L)
    return ops.softmax_forward(masked, axis=-1)


def row_softmax_offdiag_backward(dA, cache):
    if cache is None:
        return np.zeros_like(dA)
    return ops.softmax_backward(dA, cache)


def edge_weights_forward(nodes, P, name="lmga"):
    L, ce = edge_logits_forward(nodes, P, name)
    A, cs = row_softmax_offdiag_forward(L)
    return A, (ce, cs)


def edge_weights_backward(dA, cache, G):
    ce, cs = cache
    return edge_logits_backward(row_softmax_offdiag_backward(dA, cs), ce, G)


def edge_weights(nodes, P, name="lmga"):
    """Row-stochastic adjacency for a single graph of nodes ``phi x N x C x H x W``.

    Returns ``N x phi x phi``; for ``phi == 1`` the single entry is zero.
    """
    return edge_weights_forward(np.asarray(nodes)[None], P, name)[0][0]


# -- graph convolution --------------------------------------------------------

def gcn_layer_forward(nodes, A, P, wname, message_source="neighbor"):
    """``E'_p = lrelu(conv(sum_q A[p, q] * E_src, theta))``.

    ``message_source="neighbor"`` convolves the neighbour feature ``E_q``;
    ``"self"`` convolves the target ``E_p`` as an alternative reading.
    """
    phi = nodes.shape[1]
    if phi >= 2:
        rows = A.sum(axis=-1)
        if np.abs(rows - 1.0).max() > ROW_SUM_TOL:
            raise MeganError("adjacency is not row-stochastic")
    if message_source == "neighbor":
        M = np.einsum("gnpq,gqnchw->gpnchw", A, nodes)
    elif message_source == "self":
        rows = A.sum(axis=-1).transpose(0, 2, 1)  # G, phi, N
        M = rows[..., None, None, None] * nodes
    else:
        raise ValueError(f"unknown message source {message_source!r}")
    flat = M.reshape((-1,) + nodes.shape[3:])
    y, cy = conv_forward(flat, P, wname)
    z, cz = ops.leaky_relu_forward(y)
    return z.reshape(nodes.shape), (nodes, A, message_source, cy, cz)


def gcn_layer_backward(dout, cache, G):
    """Returns ``(dnodes, dA)``."""
    nodes, A, message_source, cy, cz = cache
    dy = ops.leaky_relu_backward(dout.reshape((-1,) + dout.shape[3:]), cz)
    dM = conv_backward(dy, cy, G).reshape(nodes.shape)
    if message_source == "neighbor":
        dA = np.einsum("gpnchw,gqnchw->gnpq", dM, nodes)
        dnodes = np.einsum("gnpq,gpnchw->gqnchw", A, dM)
    else:
        rows = A.sum(axis=-1).transpose(0, 2, 1)
        drows = (dM * nodes).sum(axis=(3, 4, 5))  # G, phi, N
        dA = np.broadcast_to(drows.transpose(0, 2, 1)[..., None], A.shape).copy()
        dnodes = rows[..., None, None, None] * dM
    return dnodes, dA


def gcn_layer(nodes, adjacency, P, wname, message_source="neighbor"):
    """Single graph convenience wrapper: nodes ``phi x N x C x H x W``, adjacency ``N x phi x phi``."""
    return gcn_layer_forward(np.asarray(nodes)[None], np.asarray(adjacency)[None], P, wname,
                             message_source)[0][0]


# -- full module --------------------------------------------------------------

def lmga_forward(features, P, tau, K, seed, name="lmga", message_source="neighbor",
                 global_indices=None):
    """LMGA refinement of ``T x N x C x H x W`` features.

    ``global_indices`` (0-based) overrides the seeded pool sampling.
    """
    check_rank("LMGA input", features, 5)
    if K < 1:
        raise MeganError(f"LMGA needs K >= 1, got {K}")
    T = features.shape[0]
    if global_indices is None:
        global_indices = sample_global_indices(T, tau, seed)
    elif len(global_indices) != tau:
        raise ShapeError(f"expected {tau} global indices, got {len(global_indices)}")
    fshape = features.shape
    flat = features.reshape((-1,) + fshape[2:])
    E, cng = ng_forward(flat, P, name)
    E = E.reshape(fshape)
    src = np.array([[t] + list(global_indices) for t in range(T)], dtype=np.int64)
    nodes = E[src]
    layer_caches = []
    for k in range(K):
        A, ce = edge_weights_forward(nodes, P, name)
        nodes, cg = gcn_layer_forward(nodes, A, P, f"{name}.gcn{k}", message_source)
        layer_caches.append((ce, cg))
    key = nodes[:, 0].reshape(flat.shape)
    r, cr1 = conv_lrelu_forward(key, P, name + ".refine.r1")
    r, cr2 = conv_forward(r, P, name + ".refine.r2")
    out = features + r.reshape(fshape)
    return out, (cng, src, layer_caches, cr1, cr2, nodes.shape)


def lmga_backward(dout, cache, G):
    cng, src, layer_caches, cr1, cr2, nshape = cache
    fshape = dout.shape
    flat_shape = (-1,) + fshape[2:]
    dkey = conv_lrelu_backward(conv_backward(dout.reshape(flat_shape), cr2, G), cr1, G)
    dnodes = np.zeros(nshape)
    dnodes[:, 0] = dkey.reshape(fshape)
    for ce, cg in reversed(layer_caches):
        dn, dA = gcn_layer_backward(dnodes, cg, G)
        de = edge_weights_backward(dA, ce, G)
        dnodes = dn if de is None else dn + de
    dE = np.zeros(fshape)
    Tg, phi = src.shape
    for g in range(Tg):
        for j in range(phi):
            dE[src[g, j]] += dnodes[g, j]
    dfeat = ng_backward(dE.reshape(flat_shape), cng, G).reshape(fshape)
    return dout + dfeat
