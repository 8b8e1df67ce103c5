import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handseg import nn_core
from handseg.errors import ContractError, StateError
from handseg.gcn_encoder import (
    GcnLayerParams,
    HandEncoderParams,
    encode_frame,
    encode_frame_backward,
    encode_hand,
    gcn_layer_backward,
    gcn_layer_forward,
)
from handseg.hand_graph import ANATOMICAL, PALM_STAR, HandTopology, adjacency, build_topology, finger_reference, FingerId

KINDS = [ANATOMICAL, finger_reference(FingerId.INDEX), PALM_STAR]


def dense_oracle(X, adj_hat, W, b):
    # explicit loops: out[u] = relu(sum over v in N(u)+u of X[v] @ W.T + b)
    n = adj_hat.shape[0]
    out = np.zeros((n, W.shape[0]))
    for u in range(n):
        acc = np.zeros(X.shape[1])
        for v in range(n):
            if adj_hat[u, v]:
                acc += X[v]
        out[u] = np.maximum(W @ acc + b, 0.0)
    return out


def random_encoder(rng, kind, widths=(3, 4), scale=0.5):
    layers, d_in = [], 3
    for d in widths:
        layers.append(GcnLayerParams(rng.normal(0, scale, (d, d_in)), rng.normal(0, 0.1, d)))
        d_in = d
    return HandEncoderParams(layers, build_topology(kind))


def test_path_graph_example():
    adj_hat = np.eye(3) + np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    X = np.array([[1.0], [2.0], [3.0]])
    Y, _ = gcn_layer_forward(X, adj_hat, GcnLayerParams(np.array([[1.0]]), np.zeros(1)))
    np.testing.assert_array_equal(Y[:, 0], [3, 6, 5])


def test_zero_weights_give_zero():
    adj_hat = adjacency(build_topology(ANATOMICAL), with_self_loops=True)
    Y, _ = gcn_layer_forward(np.ones((21, 3)), adj_hat, GcnLayerParams(np.zeros((5, 3)), np.zeros(5)))
    assert not Y.any()


@pytest.mark.parametrize("kind", KINDS, ids=str)
def test_layer_matches_dense_oracle(kind):
    rng = np.random.default_rng(1)
    adj_hat = adjacency(build_topology(kind), with_self_loops=True)
    X = rng.normal(size=(21, 3))
    W, b = rng.normal(size=(6, 3)), rng.normal(size=6)
    Y, _ = gcn_layer_forward(X, adj_hat, GcnLayerParams(W, b))
    np.testing.assert_allclose(Y, dense_oracle(X, adj_hat, W, b), atol=1e-12)


def test_palm_star_all_ones_example():
    # one input channel of ones (the x coordinate), all weights 1, zero bias
    p = HandEncoderParams([GcnLayerParams(np.array([[1.0, 0, 0]]), np.zeros(1)),
                           GcnLayerParams(np.ones((1, 1)), np.zeros(1))], build_topology(PALM_STAR))
    X = np.zeros((21, 3))
    X[:, 0] = 1.0
    l1, _ = gcn_layer_forward(X, p.adj_hat, p.layers[0])
    assert l1[0, 0] == 21 and np.all(l1[1:, 0] == 2)
    emb, _ = encode_hand(X, p)
    assert emb[0] == 21 + 2 * 20 and np.all(emb[1:] == 23)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(KINDS))
def test_permutation_equivariance(seed, kind):
    rng = np.random.default_rng(seed)
    adj_hat = adjacency(build_topology(kind), with_self_loops=True)
    perm = rng.permutation(21)
    P = np.eye(21)[perm]
    X = rng.normal(size=(21, 3))
    p = GcnLayerParams(rng.normal(size=(4, 3)), rng.normal(size=4))
    lhs, _ = gcn_layer_forward(P @ X, P @ adj_hat @ P.T, p)
    rhs, _ = gcn_layer_forward(X, adj_hat, p)
    np.testing.assert_allclose(lhs, P @ rhs, atol=1e-10)


@pytest.mark.parametrize("kind", KINDS, ids=str)
def test_locality(kind):
    rng = np.random.default_rng(2)
    topo = build_topology(kind)
    adj = adjacency(topo)
    enc = random_encoder(rng, kind)
    for layer in enc.layers:
        layer.b[:] = 0.0
        layer.W[:] = np.abs(layer.W)  # positive weights keep every path alive through the ReLU
    X = rng.uniform(0.5, 1.0, size=(21, 3))
    u = 5
    Y = X.copy()
    Y[u] += 1.0
    h1a, _ = gcn_layer_forward(X, enc.adj_hat, enc.layers[0])
    h1b, _ = gcn_layer_forward(Y, enc.adj_hat, enc.layers[0])
    changed1 = set(np.flatnonzero(np.any(h1a != h1b, axis=1)))
    assert changed1 <= {u} | set(np.flatnonzero(adj[u]))
    two_hop = (adj + np.eye(21)) @ (adj + np.eye(21))
    ea, _ = encode_hand(X, enc)
    eb, _ = encode_hand(Y, enc)
    changed2 = set(np.flatnonzero(np.any((ea != eb).reshape(21, -1), axis=1)))
    assert changed2 <= set(np.flatnonzero(two_hop[u]))
    if kind == PALM_STAR:
        assert len(set(np.flatnonzero(two_hop[u]))) == 21


def test_flatten_is_node_major():
    rng = np.random.default_rng(3)
    enc = random_encoder(rng, ANATOMICAL, widths=(3, 4))
    X = rng.normal(size=(21, 3))
    emb, _ = encode_hand(X, enc)
    h1, _ = gcn_layer_forward(X, enc.adj_hat, enc.layers[0])
    h2, _ = gcn_layer_forward(h1, enc.adj_hat, enc.layers[1])
    d2 = 4
    for n in range(21):
        for j in range(d2):
            assert emb[n * d2 + j] == h2[n, j]


def test_zero_params_give_zero_embedding():
    enc = HandEncoderParams([GcnLayerParams(np.zeros((4, 3)), np.zeros(4)),
                             GcnLayerParams(np.zeros((5, 4)), np.zeros(5))], build_topology(ANATOMICAL))
    emb, _ = encode_hand(np.random.default_rng(0).normal(size=(21, 3)), enc)
    assert emb.shape == (21 * 5,) and not emb.any()


def test_encode_frame_layout_and_symmetry():
    rng = np.random.default_rng(4)
    lp, rp = random_encoder(rng, PALM_STAR), random_encoder(rng, PALM_STAR)
    left, right = rng.normal(size=(21, 3)), rng.normal(size=(21, 3))
    out, _ = encode_frame(left, right, lp, rp)
    assert out.shape == (2 * 21 * 4,)
    swapped, _ = encode_frame(right, left, rp, lp)
    np.testing.assert_array_equal(swapped, np.concatenate([out[84:], out[:84]]))
    for layer in rp.layers:
        layer.W[:] = 0.0
        layer.b[:] = 0.0
    out, _ = encode_frame(left, right, lp, rp)
    assert not out[84:].any()


def test_encode_frame_width_mismatch():
    rng = np.random.default_rng(5)
    with pytest.raises(ContractError, match="width"):
        encode_frame(np.zeros((21, 3)), np.zeros((21, 3)),
                     random_encoder(rng, ANATOMICAL, (3, 4)), random_encoder(rng, ANATOMICAL, (3, 5)))


def test_invalid_topology_rejected():
    edges = build_topology(PALM_STAR).edges[:-1] + ((2, 2),)
    with pytest.raises(ContractError, match="self-loop"):
        HandEncoderParams([GcnLayerParams(np.ones((2, 3)), np.zeros(2))], HandTopology(PALM_STAR, edges))


def test_first_layer_must_take_coordinates():
    with pytest.raises(ContractError):
        HandEncoderParams([GcnLayerParams(np.ones((2, 4)), np.zeros(2))], build_topology(PALM_STAR))


def test_layer_shape_errors():
    adj_hat = np.eye(21)
    with pytest.raises(ContractError):
        gcn_layer_forward(np.ones((20, 3)), adj_hat, GcnLayerParams(np.ones((2, 3)), np.zeros(2)))
    with pytest.raises(ContractError):
        gcn_layer_forward(np.ones((21, 2)), adj_hat, GcnLayerParams(np.ones((2, 3)), np.zeros(2)))


def test_backward_without_cache():
    with pytest.raises(StateError):
        gcn_layer_backward(np.ones((21, 2)), None)


@pytest.mark.parametrize("kind", KINDS, ids=str)
def test_encode_frame_gradients(kind):
    rng = np.random.default_rng(6)
    lp, rp = random_encoder(rng, kind), random_encoder(rng, kind)
    left, right = rng.normal(size=(2, 21, 3)), rng.normal(size=(2, 21, 3))
    g_out = rng.normal(size=(2, 2 * 21 * 4))

    def loss(lft, rgt):
        out, _ = encode_frame(lft, rgt, lp, rp)
        return float(np.sum(out * g_out))

    _, cache = encode_frame(left, right, lp, rp)
    dl, dr, gl, gr = encode_frame_backward(g_out, cache)
    assert nn_core.rel_error(dl, nn_core.finite_diff_grad(lambda x: loss(x, right), left)).max() < 1e-6
    assert nn_core.rel_error(dr, nn_core.finite_diff_grad(lambda x: loss(left, x), right)).max() < 1e-6
    for enc, grads in ((lp, gl), (rp, gr)):
        for layer, (dW, db) in zip(enc.layers, grads):
            for arr, g in ((layer.W, dW), (layer.b, db)):
                def f(v, arr=arr):
                    saved = arr.copy()
                    arr[...] = v
                    try:
                        return loss(left, right)
                    finally:
                        arr[...] = saved
                fd = nn_core.finite_diff_grad(f, arr.copy())
                assert nn_core.rel_error(g, fd).max() < 1e-6
