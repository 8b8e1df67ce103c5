"""Per-hand graph convolution and the per-frame graph embedding.

A layer computes ``relu((A + I) @ X @ W.T + b)``: each node sums its own
features with its neighbours' (no degree normalization) before a shared
linear map. Two such layers run per hand, the 21 x d output is flattened
node-major, and the left and right embeddings are concatenated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn_core
from .errors import ContractError
from .hand_graph import N_NODES, HandTopology, adjacency, validate

COORD_DIM = 3


@dataclass
class GcnLayerParams:
    W: np.ndarray  # (d_out, d_in)
    b: np.ndarray  # (d_out,)


@dataclass
class HandEncoderParams:
    layers: list
    topology: HandTopology
    adj_hat: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        problems = validate(self.topology)
        if problems:
            raise ContractError("invalid topology: " + "; ".join(problems))
        if not self.layers:
            raise ContractError("a hand encoder needs at least one GCN layer")
        if self.layers[0].W.shape[1] != COORD_DIM:
            raise ContractError(
                f"first GCN layer must take {COORD_DIM} inputs, got {self.layers[0].W.shape[1]}")
        for prev, nxt in zip(self.layers[:-1], self.layers[1:]):
            if nxt.W.shape[1] != prev.W.shape[0]:
                raise ContractError(
                    f"GCN layer widths do not chain: {prev.W.shape} -> {nxt.W.shape}")
        self.adj_hat = adjacency(self.topology, with_self_loops=True)

    @property
    def out_width(self):
        return self.layers[-1].W.shape[0]


def gcn_layer_forward(X, adj_hat, p):
    """One sum-aggregation graph convolution.

    ``X`` is (..., 21, d_in); leading axes (batch, time) broadcast.
    Returns ``(Y, cache)`` with ``Y`` of shape (..., 21, d_out).
    """
    X = nn_core.as_float(X)
    n = adj_hat.shape[0]
    if adj_hat.shape != (n, n) or X.shape[-2] != n:
        raise ContractError(f"gcn_layer_forward: X{X.shape} vs adjacency{adj_hat.shape}")
    if X.shape[-1] != p.W.shape[1]:
        raise ContractError(f"gcn_layer_forward: X{X.shape} vs W{p.W.shape}")
    agg = adj_hat @ X
    Z, dense_cache = nn_core.dense_forward(agg, p.W, p.b)
    Y, relu_cache = nn_core.relu(Z)
    return Y, (adj_hat, dense_cache, relu_cache)


def gcn_layer_backward(dY, cache):
    """Returns ``(dX, dW, db)``."""
    adj_hat, dense_cache, relu_cache = nn_core._require_cache(cache, "gcn_layer")
    dZ = nn_core.relu_backward(dY, relu_cache)
    dagg, dW, db = nn_core.dense_backward(dZ, dense_cache)
    return adj_hat.T @ dagg, dW, db


def encode_hand(keypoints, p):
    """Graph embedding of one hand.

    ``keypoints`` is (..., 21, 3). Returns ``(embedding, cache)`` where the
    embedding is (..., 21 * d_last) and ``embedding[..., n * d + j]`` is the
    activation of channel ``j`` at node ``n``.
    """
    keypoints = nn_core.as_float(keypoints)
    if keypoints.shape[-2:] != (N_NODES, COORD_DIM):
        raise ContractError(f"expected (..., {N_NODES}, {COORD_DIM}) keypoints, got {keypoints.shape}")
    h = keypoints
    caches = []
    for layer in p.layers:
        h, c = gcn_layer_forward(h, p.adj_hat, layer)
        caches.append(c)
    return h.reshape(h.shape[:-2] + (-1,)), (caches, h.shape)


def encode_hand_backward(d_emb, cache):
    """Returns ``(d_keypoints, [(dW, db), ...])`` in layer order."""
    caches, shape = nn_core._require_cache(cache, "encode_hand")
    dh = d_emb.reshape(shape)
    grads = []
    for c in reversed(caches):
        dh, dW, db = gcn_layer_backward(dh, c)
        grads.append((dW, db))
    return dh, grads[::-1]


def encode_frame(left, right, left_p, right_p):
    """``[encode_hand(left) | encode_hand(right)]`` along the last axis."""
    if left_p.out_width != right_p.out_width:
        raise ContractError(
            f"hand encoders disagree on output width: {left_p.out_width} vs {right_p.out_width}")
    el, cl = encode_hand(left, left_p)
    er, cr = encode_hand(right, right_p)
    return np.concatenate([el, er], axis=-1), (cl, cr, el.shape[-1])


def encode_frame_backward(d_out, cache):
    """Returns ``(d_left, d_right, left_layer_grads, right_layer_grads)``."""
    cl, cr, split = nn_core._require_cache(cache, "encode_frame")
    dl, gl = encode_hand_backward(d_out[..., :split], cl)
    dr, gr = encode_hand_backward(d_out[..., split:], cr)
    return dl, dr, gl, gr
