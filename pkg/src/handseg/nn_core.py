"""Dense kernels with hand-written gradients and a finite-difference oracle.

Every forward function returns ``(output, cache)``; the matching backward
takes the upstream gradient and that cache. Caches are plain tuples owned by
the caller, so concurrent evaluations of the same parameters never share
state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, StateError


def _require_cache(cache, what):
    if cache is None:
        raise StateError(f"{what}: backward called without a cached forward pass")
    return cache


def as_float(x):
    return np.asarray(x, dtype=np.float64)


def glorot_uniform(rng, fan_out, fan_in):
    """Weight matrix of shape (fan_out, fan_in), uniform in +-sqrt(6/(fan_in+fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


# -- dense ------------------------------------------------------------------

def dense_forward(x, W, b):
    """``W @ x + b`` over the last axis of ``x`` (leading axes are batch axes)."""
    x = as_float(x)
    W = as_float(W)
    b = as_float(b)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1:] != (W.shape[1],):
        raise ContractError(
            f"dense_forward shape mismatch: x{x.shape}, W{W.shape}, b{b.shape}")
    return x @ W.T + b, (x, W)


def dense_backward(dy, cache):
    """Returns ``(dx, dW, db)``."""
    x, W = _require_cache(cache, "dense")
    dx = dy @ W
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, dy2.T @ x2, dy2.sum(axis=0)


# -- activations ------------------------------------------------------------

def relu(x):
    x = as_float(x)
    return np.maximum(x, 0.0), x > 0


def relu_backward(dy, cache):
    mask = _require_cache(cache, "relu")
    return dy * mask


def sigmoid(x):
    # stable for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x, axis=-1):
    x = as_float(x)
    if not np.all(np.isfinite(x)):
        raise ContractError("softmax input must be finite")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(p, label):
    """``-log p[label]`` for a single probability vector."""
    p = as_float(p)
    if not 0 <= label < p.shape[-1]:
        raise ContractError(f"label {label} out of range for {p.shape[-1]} classes")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ContractError("cross_entropy expects a probability vector")
    return float(-np.log(p[label]))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits) over a batch.

    ``logits`` is (B, C), ``labels`` (B,) integer. Returns ``(loss, probs, cache)``.
    """
    logits = as_float(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ContractError(f"labels must be {n} ints in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    loss = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)
    return float(loss), probs, (probs, labels)


def softmax_cross_entropy_backward(dloss, cache):
    """Gradient w.r.t. the logits: ``(softmax(z) - onehot(y)) / B``."""
    probs, labels = _require_cache(cache, "softmax_cross_entropy")
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1.0
    return g * (dloss / len(labels))


# -- gradient oracle --------------------------------------------------------

def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def rel_error(a, b):
    """Elementwise ``|a-b| / max(1, |a|, |b|)``."""
    a = as_float(a)
    b = as_float(b)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


@dataclass
class GradCheckReport:
    """Maximum relative error per parameter block."""

    errors: dict = field(default_factory=dict)
    eps: float = 1e-5
    tolerance: float = 1e-4

    @property
    def passed(self):
        return all(err < self.tolerance for err in self.errors.values())

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    def failing_blocks(self):
        return [name for name, err in self.errors.items() if not err < self.tolerance]

    def lines(self):
        out = [f"{name}\t{err:.3e}\t{'ok' if err < self.tolerance else 'FAIL'}"
               for name, err in self.errors.items()]
        out.append(f"{'PASS' if self.passed else 'FAIL'} max_rel_err={self.max_error:.3e} "
                   f"eps={self.eps:g} tol={self.tolerance:g}")
        return out


def check_param_grads(loss_fn, params, grads, eps=1e-5, tolerance=1e-4,
                      block_of=None, max_entries=None, rng=None):
    """Compare analytic ``grads`` to central differences of ``loss_fn(params)``.

    ``params`` and ``grads`` are dicts of arrays keyed alike. ``loss_fn`` is
    called with the (mutated in place, then restored) ``params`` dict.
    ``block_of`` maps an array name to its report block (default: identity).
    With ``max_entries`` set, at most that many randomly chosen entries per
    array are probed.
    """
    block_of = block_of or (lambda name: name)
    rng = rng or np.random.default_rng(0)
    report = GradCheckReport(eps=eps, tolerance=tolerance)
    for name, value in params.items():
        flat = value.reshape(-1)
        gflat = np.asarray(grads[name]).reshape(-1)
        if gflat.shape != flat.shape:
            raise ContractError(f"gradient for {name} has the wrong size")
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = loss_fn(params)
            flat[i] = old - eps
            fm = loss_fn(params)
            flat[i] = old
            numeric = (fp - fm) / (2.0 * eps)
            worst = max(worst, float(rel_error(gflat[i], numeric)))
        block = block_of(name)
        report.errors[block] = max(report.errors.get(block, 0.0), worst)
    return report
