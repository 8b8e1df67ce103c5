"""Stacked bidirectional LSTM and additive attention pooling over time.

Sequences are arrays of shape (B, T, d); a 2-D (T, d) array is treated as a
single sequence and the batch axis is dropped again on output. All
sequences in one batch share T; variable-length data is batched by length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_core
from .errors import ContractError


@dataclass
class LstmCellParams:
    """Gate weights stacked as rows [input, forget, candidate, output].

    ``W`` is (4h, d_in + h) acting on ``[x | h_prev]``; ``b`` is (4h,).
    """

    W: np.ndarray
    b: np.ndarray

    @property
    def hidden(self):
        return self.W.shape[0] // 4

    @property
    def d_in(self):
        return self.W.shape[1] - self.hidden

    def check(self):
        h = self.hidden
        if self.W.shape[0] != 4 * h or self.W.shape[1] <= h or self.b.shape != (4 * h,):
            raise ContractError(f"bad LSTM parameter shapes W{self.W.shape} b{self.b.shape}")


@dataclass
class BiLstmStackParams:
    layers: list  # [(forward LstmCellParams, backward LstmCellParams), ...]

    def __post_init__(self):
        if not self.layers:
            raise ContractError("BiLSTM stack needs at least one layer")
        for k, (fw, bw) in enumerate(self.layers):
            fw.check()
            bw.check()
            if fw.hidden != bw.hidden or fw.d_in != bw.d_in:
                raise ContractError(f"layer {k}: forward/backward cells disagree")
            if k > 0 and fw.d_in != 2 * self.layers[k - 1][0].hidden:
                raise ContractError(
                    f"layer {k} takes {fw.d_in} inputs, previous layer emits "
                    f"{2 * self.layers[k - 1][0].hidden}")

    @property
    def depth(self):
        return len(self.layers)

    @property
    def out_width(self):
        return 2 * self.layers[-1][0].hidden


@dataclass
class AttentionParams:
    U: np.ndarray  # (a, D) projection
    v: np.ndarray  # (a,) score vector


def _sig(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_cell_step(x, h_prev, c_prev, p):
    """One LSTM update; returns ``(h, c)``. Works on vectors or (B, .) batches."""
    x = nn_core.as_float(x)
    h_prev = nn_core.as_float(h_prev)
    c_prev = nn_core.as_float(c_prev)
    h = p.hidden
    if x.shape[-1] != p.d_in or h_prev.shape[-1] != h or c_prev.shape[-1] != h:
        raise ContractError(
            f"lstm_cell_step: x{x.shape} h{h_prev.shape} c{c_prev.shape} vs W{p.W.shape}")
    z = np.concatenate([x, h_prev], axis=-1) @ p.W.T + p.b
    i, f, o = _sig(z[..., :h]), _sig(z[..., h:2 * h]), _sig(z[..., 3 * h:])
    g = np.tanh(z[..., 2 * h:3 * h])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


def lstm_sequence_forward(X, p):
    """Run one direction left to right from a zero state.

    ``X`` is (B, T, d_in); returns ``(H, cache)`` with ``H`` of shape (B, T, h).
    """
    X = np.ascontiguousarray(X)  # reversed views make matmul very slow
    B, T, d = X.shape
    if d != p.d_in:
        raise ContractError(f"LSTM expects {p.d_in} inputs, got {d}")
    h = p.hidden
    Wx, Wh = p.W[:, :d], p.W[:, d:]
    xz = X @ Wx.T + p.b
    gates = np.empty((T, 4, B, h))
    cs = np.empty((T + 1, B, h))
    hs = np.empty((T + 1, B, h))
    tcs = np.empty((T, B, h))
    cs[0] = 0.0
    hs[0] = 0.0
    for t in range(T):
        z = xz[:, t] + hs[t] @ Wh.T
        i = _sig(z[:, :h])
        f = _sig(z[:, h:2 * h])
        g = np.tanh(z[:, 2 * h:3 * h])
        o = _sig(z[:, 3 * h:])
        cs[t + 1] = f * cs[t] + i * g
        tcs[t] = np.tanh(cs[t + 1])
        hs[t + 1] = o * tcs[t]
        gates[t, 0], gates[t, 1], gates[t, 2], gates[t, 3] = i, f, g, o
    H = hs[1:].transpose(1, 0, 2)
    return H, (X, p, gates, cs, hs, tcs)


def lstm_sequence_backward(dH, cache):
    """Returns ``(dX, dW, db)``."""
    X, p, gates, cs, hs, tcs = nn_core._require_cache(cache, "lstm_sequence")
    dH = np.ascontiguousarray(dH)
    B, T, d = X.shape
    h = p.hidden
    Wh = p.W[:, d:]
    dZ = np.empty((T, B, 4 * h))
    dh_next = np.zeros((B, h))
    dc_next = np.zeros((B, h))
    for t in range(T - 1, -1, -1):
        i, f, g, o = gates[t]
        dh = dH[:, t] + dh_next
        tc = tcs[t]
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = dZ[t]
        dz[:, :h] = dc * g * i * (1.0 - i)
        dz[:, h:2 * h] = dc * cs[t] * f * (1.0 - f)
        dz[:, 2 * h:3 * h] = dc * i * (1.0 - g * g)
        dz[:, 3 * h:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dz @ Wh
    dZ2 = dZ.reshape(T * B, 4 * h)
    Xt = X.transpose(1, 0, 2).reshape(T * B, d)
    Hprev = hs[:-1].reshape(T * B, h)
    dW = np.concatenate([dZ2.T @ Xt, dZ2.T @ Hprev], axis=1)
    db = dZ2.sum(axis=0)
    dX = (dZ @ p.W[:, :d]).transpose(1, 0, 2)
    return dX, dW, db


def _batched(seq):
    seq = nn_core.as_float(seq)
    if seq.ndim == 2:
        return seq[None], True
    if seq.ndim != 3:
        raise ContractError(f"expected (T, d) or (B, T, d) sequence, got shape {seq.shape}")
    return seq, False


def bilstm_forward(seq, p):
    """Stacked bidirectional LSTM.

    Each layer runs a forward pass left to right and a backward pass right to
    left, both from zero state, and emits ``[h_fwd | h_bwd]`` per step.
    Returns ``(outputs, cache)``; outputs are (B, T, 2h) or (T, 2h).
    """
    X, squeeze = _batched(seq)
    if X.shape[1] == 0:
        raise ContractError("bilstm_forward needs a non-empty sequence")
    caches = []
    for fw, bw in p.layers:
        Hf, cf = lstm_sequence_forward(X, fw)
        Hb_rev, cb = lstm_sequence_forward(X[:, ::-1], bw)
        X = np.concatenate([Hf, Hb_rev[:, ::-1]], axis=-1)
        caches.append((cf, cb, fw.hidden))
    out = X[0] if squeeze else X
    return out, (caches, squeeze)


def bilstm_backward(d_out, cache):
    """Returns ``(d_seq, [(dW_f, db_f, dW_b, db_b), ...])`` in layer order."""
    caches, squeeze = nn_core._require_cache(cache, "bilstm")
    dX = d_out[None] if squeeze else d_out
    grads = []
    for cf, cb, h in reversed(caches):
        dXf, dWf, dbf = lstm_sequence_backward(dX[..., :h], cf)
        dXb_rev, dWb, dbb = lstm_sequence_backward(dX[:, ::-1, h:], cb)
        dX = dXf + dXb_rev[:, ::-1]
        grads.append((dWf, dbf, dWb, dbb))
    return (dX[0] if squeeze else dX), grads[::-1]


def attention_pool(seq, p):
    """Additive attention over time.

    Scores ``e_t = v . tanh(U s_t)``, weights ``softmax_t(e)``, context
    ``sum_t w_t s_t``. Returns ``(context, weights, cache)``.
    """
    S, squeeze = _batched(seq)
    if S.shape[1] == 0:
        raise ContractError("attention_pool needs a non-empty sequence")
    if p.U.shape[1] != S.shape[-1] or p.v.shape != (p.U.shape[0],):
        raise ContractError(f"attention shapes U{p.U.shape} v{p.v.shape} vs seq{S.shape}")
    A = np.tanh(S @ p.U.T)
    e = A @ p.v
    w = nn_core.softmax(e, axis=1)
    ctx = (w[:, None, :] @ S)[:, 0]
    cache = (S, A, w, p, squeeze)
    if squeeze:
        return ctx[0], w[0], cache
    return ctx, w, cache


def attention_backward(d_ctx, cache):
    """Returns ``(d_seq, dU, dv)``."""
    S, A, w, p, squeeze = nn_core._require_cache(cache, "attention")
    if squeeze:
        d_ctx = d_ctx[None]
    dS = w[..., None] * d_ctx[:, None, :]
    dw = (S @ d_ctx[:, :, None])[..., 0]
    de = w * (dw - (w * dw).sum(axis=1, keepdims=True))
    a = A.shape[-1]
    dv = de.reshape(-1) @ A.reshape(-1, a)
    dpre = de[..., None] * p.v * (1.0 - A * A)
    dU = dpre.reshape(-1, a).T @ S.reshape(-1, S.shape[-1])
    dS += dpre @ p.U
    return (dS[0] if squeeze else dS), dU, dv
