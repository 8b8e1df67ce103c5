"""Full classifier: per-hand GCN -> stacked BiLSTM -> attention -> FC -> softmax.

Parameters live in one ordered ``dict`` of float64 arrays with dotted names
(``left.gcn1.W``, ``lstm2.bwd.b``, ``attn.U``, ``fc3.W`` ...). The optimizer,
checkpoint writer and gradient checker all work on that dict directly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import nn_core
from .classifier_head import DEFAULT_FC_WIDTHS, FcHeadParams, head_backward, head_forward
from .errors import ContractError
from .gcn_encoder import (
    COORD_DIM,
    GcnLayerParams,
    HandEncoderParams,
    encode_frame,
    encode_frame_backward,
)
from .hand_graph import N_NODES, TopologyKind, build_topology
from .temporal_model import (
    AttentionParams,
    BiLstmStackParams,
    LstmCellParams,
    attention_backward,
    attention_pool,
    bilstm_backward,
    bilstm_forward,
)

COORD_RANGE = 96.0
HANDS = ("left", "right")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``attention_width`` of ``None`` means "same as ``hidden``". With
    ``rescale_input`` the stored [0, 96] coordinates are mapped affinely
    onto [-1, 1] before the first GCN layer.
    """

    n_classes: int = 100
    topology: str = "star"
    gcn_widths: tuple = (64, 64)
    hidden: int = 400
    depth: int = 3
    attention_width: int | None = None
    fc_widths: tuple = DEFAULT_FC_WIDTHS
    rescale_input: bool = True

    def __post_init__(self):
        object.__setattr__(self, "gcn_widths", tuple(int(w) for w in self.gcn_widths))
        object.__setattr__(self, "fc_widths", tuple(int(w) for w in self.fc_widths))
        object.__setattr__(self, "topology", str(TopologyKind.parse(str(self.topology))))
        if self.n_classes < 2:
            raise ContractError("n_classes must be at least 2")
        if not self.gcn_widths or min(self.gcn_widths) <= 0:
            raise ContractError("gcn_widths must be positive and non-empty")
        if self.hidden <= 0 or self.depth < 1:
            raise ContractError("hidden must be positive and depth >= 1")
        if self.fc_widths and min(self.fc_widths) <= 0:
            raise ContractError("fc_widths must be positive")

    @property
    def attn_width(self):
        return self.attention_width or self.hidden

    @property
    def frame_width(self):
        return 2 * N_NODES * self.gcn_widths[-1]

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["gcn_widths"] = list(self.gcn_widths)
        d["fc_widths"] = list(self.fc_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


TINY_CONFIG = ModelConfig(n_classes=5, topology="star", gcn_widths=(4, 4), hidden=8,
                          depth=2, attention_width=8, fc_widths=(8, 8, 8))


def param_block(name):
    """Report block of a parameter array: its name minus the trailing ``.W``/``.b``."""
    return name.rsplit(".", 1)[0]


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict = field(default_factory=dict)

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def blocks(self):
        return list(dict.fromkeys(param_block(k) for k in self.arrays))

    def n_parameters(self):
        return int(sum(v.size for v in self.arrays.values()))

    def norm(self):
        return float(np.sqrt(sum(float(np.sum(v * v)) for v in self.arrays.values())))

    def hand(self, side):
        n = len(self.config.gcn_widths)
        layers = [GcnLayerParams(self.arrays[f"{side}.gcn{k}.W"], self.arrays[f"{side}.gcn{k}.b"])
                  for k in range(1, n + 1)]
        return HandEncoderParams(layers, build_topology(self.config.topology))

    def bilstm(self):
        layers = []
        for k in range(1, self.config.depth + 1):
            layers.append(tuple(
                LstmCellParams(self.arrays[f"lstm{k}.{d}.W"], self.arrays[f"lstm{k}.{d}.b"])
                for d in ("fwd", "bwd")))
        return BiLstmStackParams(layers)

    def attention(self):
        return AttentionParams(self.arrays["attn.U"], self.arrays["attn.v"])

    def head(self):
        n = len(self.config.fc_widths) + 1
        return FcHeadParams([(self.arrays[f"fc{k}.W"], self.arrays[f"fc{k}.b"])
                             for k in range(1, n + 1)])


def init_params(config, seed=0):
    """Glorot-uniform weights, zero biases, LSTM forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for side in HANDS:
        d_in = COORD_DIM
        for k, d_out in enumerate(config.gcn_widths, start=1):
            arrays[f"{side}.gcn{k}.W"] = nn_core.glorot_uniform(rng, d_out, d_in)
            arrays[f"{side}.gcn{k}.b"] = np.zeros(d_out)
            d_in = d_out
    h = config.hidden
    d_in = config.frame_width
    for k in range(1, config.depth + 1):
        for d in ("fwd", "bwd"):
            W = np.concatenate([nn_core.glorot_uniform(rng, h, d_in + h) for _ in range(4)])
            b = np.zeros(4 * h)
            b[h:2 * h] = 1.0
            arrays[f"lstm{k}.{d}.W"] = W
            arrays[f"lstm{k}.{d}.b"] = b
        d_in = 2 * h
    a = config.attn_width
    arrays["attn.U"] = nn_core.glorot_uniform(rng, a, 2 * h)
    arrays["attn.v"] = nn_core.glorot_uniform(rng, 1, a)[0]
    widths = (*config.fc_widths, config.n_classes)
    d_in = 2 * h
    for k, d_out in enumerate(widths, start=1):
        arrays[f"fc{k}.W"] = nn_core.glorot_uniform(rng, d_out, d_in)
        arrays[f"fc{k}.b"] = np.zeros(d_out)
        d_in = d_out
    return ModelParams(config, arrays)


def _check_keypoints(keypoints):
    kp = nn_core.as_float(keypoints)
    if kp.ndim == 4:
        kp = kp[None]
    if kp.ndim != 5 or kp.shape[2:] != (2, N_NODES, COORD_DIM):
        raise ContractError(f"expected keypoints (B, T, 2, {N_NODES}, {COORD_DIM}), got {kp.shape}")
    if kp.shape[1] == 0:
        raise ContractError("empty sequence")
    return kp


def forward(params, keypoints):
    """Logits for a batch of equal-length sequences.

    ``keypoints`` is (B, T, 2, 21, 3) with hand 0 = left, hand 1 = right.
    Returns ``(logits, cache)``; logits are (B, n_classes).
    """
    cfg = params.config
    kp = _check_keypoints(keypoints)
    scale = 2.0 / COORD_RANGE if cfg.rescale_input else 1.0
    x = kp * scale - 1.0 if cfg.rescale_input else kp
    frames, c_enc = encode_frame(x[:, :, 0], x[:, :, 1], params.hand("left"), params.hand("right"))
    seq, c_rnn = bilstm_forward(frames, params.bilstm())
    ctx, weights, c_att = attention_pool(seq, params.attention())
    logits, c_head = head_forward(ctx, params.head())
    return logits, (c_enc, c_rnn, c_att, c_head, scale, weights)


def backward(params, d_logits, cache):
    """Gradients of all parameters (and the keypoints) given ``d loss / d logits``.

    Returns ``(grads, d_keypoints)``; ``grads`` is keyed like ``params.arrays``.
    """
    c_enc, c_rnn, c_att, c_head, scale, _ = nn_core._require_cache(cache, "model")
    grads = {}
    d_ctx, head_grads = head_backward(d_logits, c_head)
    for k, (dW, db) in enumerate(head_grads, start=1):
        grads[f"fc{k}.W"], grads[f"fc{k}.b"] = dW, db
    d_seq, dU, dv = attention_backward(d_ctx, c_att)
    grads["attn.U"], grads["attn.v"] = dU, dv
    d_frames, rnn_grads = bilstm_backward(d_seq, c_rnn)
    for k, (dWf, dbf, dWb, dbb) in enumerate(rnn_grads, start=1):
        grads[f"lstm{k}.fwd.W"], grads[f"lstm{k}.fwd.b"] = dWf, dbf
        grads[f"lstm{k}.bwd.W"], grads[f"lstm{k}.bwd.b"] = dWb, dbb
    dl, dr, gl, gr = encode_frame_backward(d_frames, c_enc)
    for side, g in (("left", gl), ("right", gr)):
        for k, (dW, db) in enumerate(g, start=1):
            grads[f"{side}.gcn{k}.W"], grads[f"{side}.gcn{k}.b"] = dW, db
    d_kp = np.stack([dl, dr], axis=2) * scale
    if grads.keys() != params.arrays.keys():
        raise ContractError("gradient/parameter name mismatch")
    return {name: grads[name] for name in params.arrays}, d_kp


def loss_and_grads(params, keypoints, labels):
    """Mean cross-entropy over the batch plus parameter gradients."""
    logits, cache = forward(params, keypoints)
    loss, probs, ce_cache = nn_core.softmax_cross_entropy(logits, labels)
    d_logits = nn_core.softmax_cross_entropy_backward(1.0, ce_cache)
    grads, _ = backward(params, d_logits, cache)
    return loss, grads, probs


def loss_value(params, keypoints, labels):
    logits, _ = forward(params, keypoints)
    loss, _, _ = nn_core.softmax_cross_entropy(logits, labels)
    return loss


def predict_proba(params, keypoints):
    """Softmax probabilities, (B, n_classes)."""
    logits, _ = forward(params, keypoints)
    return nn_core.softmax(logits, axis=-1)
