"""Fully connected head: dense layers with ReLU between them, softmax on top."""

from __future__ import annotations

from dataclasses import dataclass

from . import nn_core
from .errors import ContractError

DEFAULT_FC_WIDTHS = (512, 256, 128)


@dataclass
class FcHeadParams:
    layers: list  # [(W, b), ...]; the last layer emits logits

    def __post_init__(self):
        if not self.layers:
            raise ContractError("FC head needs at least one layer")
        for (W0, _), (W1, _) in zip(self.layers[:-1], self.layers[1:]):
            if W1.shape[1] != W0.shape[0]:
                raise ContractError(f"FC widths do not chain: {W0.shape} -> {W1.shape}")

    @property
    def n_classes(self):
        return self.layers[-1][0].shape[0]

    @property
    def in_width(self):
        return self.layers[0][0].shape[1]


def head_forward(context, p):
    """Logits for a (B, D) or (D,) context. Returns ``(logits, cache)``."""
    context = nn_core.as_float(context)
    if context.shape[-1] != p.in_width:
        raise ContractError(f"FC head expects width {p.in_width}, got {context.shape[-1]}")
    h = context
    caches = []
    last = len(p.layers) - 1
    for k, (W, b) in enumerate(p.layers):
        h, dc = nn_core.dense_forward(h, W, b)
        rc = None
        if k < last:
            h, rc = nn_core.relu(h)
        caches.append((dc, rc))
    return h, caches


def head_backward(d_logits, cache):
    """Returns ``(d_context, [(dW, db), ...])`` in layer order."""
    caches = nn_core._require_cache(cache, "head")
    dh = d_logits
    grads = []
    for dc, rc in reversed(caches):
        if rc is not None:
            dh = nn_core.relu_backward(dh, rc)
        dh, dW, db = nn_core.dense_backward(dh, dc)
        grads.append((dW, db))
    return dh, grads[::-1]


def classify(context, p):
    """Class probabilities for one context vector (or a batch of them)."""
    logits, _ = head_forward(context, p)
    return nn_core.softmax(logits, axis=-1)
