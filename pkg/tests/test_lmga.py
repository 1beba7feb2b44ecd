import numpy as np
import pytest

from megan import lmga
from megan.tensor import MeganError

C = 4


def identity3(c):
    w = np.zeros((c, c, 3, 3))
    w[np.arange(c), np.arange(c), 1, 1] = 1.0
    return w


def lmga_params(rng, K=2, noise=0.1):
    P = {}
    lmga.init_lmga(P, "lmga", C, K, seed=2)
    return {k: v + noise * rng.standard_normal(v.shape) for k, v in P.items()}


# -- pools --------------------------------------------------------------------

def test_empty_global_pool(rng):
    pool = lmga.build_pools(rng.standard_normal((7, 1, C, 2, 2)), 0, seed=1)
    assert pool.global_.shape[0] == 0 and pool.global_indices == ()


def test_full_global_pool_is_permutation(rng):
    pool = lmga.build_pools(rng.standard_normal((7, 1, C, 2, 2)), 7, seed=1)
    assert sorted(pool.global_indices) == list(range(1, 8))


def test_pool_sampling_is_seeded():
    assert lmga.sample_global_indices(7, 3, 42) == lmga.sample_global_indices(7, 3, 42)


def test_pool_sampling_is_uniform():
    counts = np.zeros(7)
    for seed in range(100):
        for i in lmga.sample_global_indices(7, 2, seed):
            counts[i] += 1
    assert np.all(np.abs(counts / 100 - 2 / 7) <= 0.15)


def test_tau_too_large():
    with pytest.raises(MeganError):
        lmga.build_pools(np.zeros((3, 1, C, 2, 2)), 4, seed=0)


# -- aggregation --------------------------------------------------------------

def test_identity_encoder_returns_pooled_features(rng):
    P = lmga_params(rng)
    for i in (1, 2, 3):
        P[f"lmga.ng.c{i}.w"] = identity3(C)
        P[f"lmga.ng.c{i}.b"] = np.zeros(C)
    feats = rng.uniform(0, 1, (5, 1, C, 3, 3))  # non-negative, so the LeakyReLUs pass through
    pool = lmga.build_pools(feats, 2, seed=3)
    nodes = lmga.aggregate(pool, 2, P)
    np.testing.assert_allclose(nodes[0], feats[1], atol=1e-15)
    for j, g in enumerate(pool.global_indices, 1):
        np.testing.assert_allclose(nodes[j], feats[g - 1], atol=1e-15)


def test_single_node_without_global_pool(rng):
    P = lmga_params(rng)
    feats = rng.standard_normal((3, 1, C, 3, 3))
    nodes = lmga.aggregate(lmga.build_pools(feats, 0, seed=0), 3, P)
    assert nodes.shape == (1, 1, C, 3, 3)
    np.testing.assert_array_equal(nodes[0], lmga.ng_forward(feats[2], P, "lmga")[0])


def test_aggregate_rejects_bad_key(rng):
    pool = lmga.build_pools(rng.standard_normal((3, 1, C, 2, 2)), 1, seed=0)
    with pytest.raises(MeganError):
        lmga.aggregate(pool, 0, lmga_params(rng))


# -- edge weights -------------------------------------------------------------

def test_identical_nodes_give_uniform_rows(rng):
    v = rng.standard_normal((1, C, 3, 3))
    A = lmga.edge_weights(np.stack([v, v, v]), lmga_params(rng))[0]
    np.testing.assert_allclose(A, [[0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]], atol=1e-15)


def test_two_nodes_give_unit_off_diagonal(rng):
    A = lmga.edge_weights(rng.standard_normal((2, 1, C, 3, 3)), lmga_params(rng))[0]
    np.testing.assert_array_equal(A, [[0.0, 1.0], [1.0, 0.0]])


def test_single_node_adjacency_is_empty(rng):
    A = lmga.edge_weights(rng.standard_normal((1, 1, C, 3, 3)), lmga_params(rng))
    assert A.shape == (1, 1, 1) and A[0, 0, 0] == 0


def test_adjacency_is_row_stochastic(rng):
    A = lmga.edge_weights(rng.standard_normal((5, 2, C, 3, 3)), lmga_params(rng))
    assert np.abs(A.sum(-1) - 1).max() <= 1e-9
    assert np.all(A[:, np.arange(5), np.arange(5)] == 0)


def test_adjacency_follows_node_permutation(rng):
    P = lmga_params(rng)
    nodes = rng.standard_normal((4, 1, C, 3, 3))
    perm = rng.permutation(4)
    A = lmga.edge_weights(nodes, P)[0]
    Ap = lmga.edge_weights(nodes[perm], P)[0]
    np.testing.assert_allclose(Ap, A[np.ix_(perm, perm)], atol=1e-14)


def test_edge_logits_are_symmetric(rng):
    L, _ = lmga.edge_logits_forward(rng.standard_normal((2, 4, 1, C, 3, 3)), lmga_params(rng), "lmga")
    assert np.array_equal(L, L.transpose(0, 1, 3, 2))


# -- graph convolution --------------------------------------------------------

def test_gcn_constant_nodes_identity_kernel(rng):
    v = rng.uniform(0, 1, (1, C, 3, 3))
    A = np.full((1, 3, 3), 0.5)
    A[0, np.arange(3), np.arange(3)] = 0
    out = lmga.gcn_layer(np.stack([v] * 3), A, {"t.w": identity3(C)}, "t")
    np.testing.assert_allclose(out, np.stack([v] * 3), atol=1e-15)


def test_gcn_zero_kernel_gives_zero(rng):
    nodes = rng.standard_normal((3, 1, C, 3, 3))
    A = lmga.edge_weights(nodes, lmga_params(rng))
    assert not lmga.gcn_layer(nodes, A, {"t.w": np.zeros((C, C, 3, 3))}, "t").any()


def test_gcn_key_output_ignores_neighbour_order(rng):
    P = lmga_params(rng)
    nodes = rng.standard_normal((4, 1, C, 3, 3))
    perm = np.concatenate([[0], 1 + rng.permutation(3)])
    out = lmga.gcn_layer(nodes, lmga.edge_weights(nodes, P), P, "lmga.gcn0")
    outp = lmga.gcn_layer(nodes[perm], lmga.edge_weights(nodes[perm], P), P, "lmga.gcn0")
    assert np.abs(out[0] - outp[0]).max() <= 1e-12


def test_gcn_rejects_non_stochastic_adjacency(rng):
    nodes = rng.standard_normal((3, 1, C, 3, 3))
    with pytest.raises(MeganError, match="row-stochastic"):
        lmga.gcn_layer(nodes, np.full((1, 3, 3), 0.4), {"t.w": identity3(C)}, "t")


def test_gcn_self_message_variant_differs(rng):
    P = lmga_params(rng)
    nodes = rng.standard_normal((3, 1, C, 3, 3))
    A = lmga.edge_weights(nodes, P)
    a = lmga.gcn_layer(nodes, A, P, "lmga.gcn0", "neighbor")
    b = lmga.gcn_layer(nodes, A, P, "lmga.gcn0", "self")
    np.testing.assert_allclose(b, lmga.gcn_layer(nodes, A, P, "lmga.gcn0", "self"))
    assert not np.allclose(a, b)


# -- full module --------------------------------------------------------------

def test_zero_refinement_is_identity(rng):
    P = lmga_params(rng)
    for k in list(P):
        if ".refine." in k:
            P[k] = np.zeros_like(P[k])
    feats = rng.standard_normal((7, 1, C, 3, 3))
    out, _ = lmga.lmga_forward(feats, P, 2, 2, seed=0)
    assert np.array_equal(out, feats)


def test_degenerate_single_node_graphs(rng):
    P = lmga_params(rng, K=1)
    P["lmga.refine.r1.b"][:] = 0
    P["lmga.refine.r2.b"][:] = 0
    feats = rng.standard_normal((7, 1, C, 3, 3))
    out, _ = lmga.lmga_forward(feats, P, 0, 1, seed=0)
    assert np.array_equal(out, feats)


def test_global_node_order_does_not_matter(rng):
    P = lmga_params(rng)
    feats = rng.standard_normal((7, 1, C, 3, 3))
    a, _ = lmga.lmga_forward(feats, P, 3, 2, seed=0, global_indices=(4, 0, 6))
    b, _ = lmga.lmga_forward(feats, P, 3, 2, seed=0, global_indices=(6, 4, 0))
    assert np.abs(a - b).max() <= 1e-12


def test_lmga_is_deterministic(rng):
    P = lmga_params(rng)
    feats = rng.standard_normal((7, 1, C, 3, 3))
    assert np.array_equal(lmga.lmga_forward(feats, P, 2, 2, 9)[0], lmga.lmga_forward(feats, P, 2, 2, 9)[0])


def test_lmga_needs_a_layer(rng):
    with pytest.raises(MeganError):
        lmga.lmga_forward(rng.standard_normal((3, 1, C, 2, 2)), lmga_params(rng), 1, 0, 0)


def test_graph_state_counts(rng):
    g = lmga.GraphState(rng.standard_normal((3, 1, C, 2, 2)), np.zeros((1, 3, 3)))
    assert g.phi == 3 and g.num_edges == 6
