"""Training loop, evaluation, gradient check, checkpoints and the ablation grid."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import model as mdl
from . import nn_core
from .data_io import TRAIN_FRAMES, normalize_sequence, resample_frames
from .errors import CheckpointError, ContractError, SplitError, TrainingError
from .hand_graph import TopologyKind

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HGS1"
ABLATION_COLUMNS = ("topology", "architecture", "fc", "hidden", "depth", "seed", "accuracy")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.005
    weight_decay: float = 1e-4
    batch_size: int = 50
    max_epochs: int = 200
    frames_per_sample: int = TRAIN_FRAMES
    test_fraction: float = 0.20
    val_fraction: float = 0.10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    aggregation: str = "sum"
    gcn_layers: int = 2
    bilstm_depth: int = 3
    seed: int = 0
    early_stop_patience: int = 20
    clip_norm: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ContractError("test_fraction must lie strictly between 0 and 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ContractError("val_fraction must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 0 or self.frames_per_sample < 1:
            raise ContractError("batch_size, max_epochs and frames_per_sample must be positive")
        if self.aggregation != "sum":
            raise ContractError("only 'sum' aggregation is implemented")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ContractError("learning_rate and weight_decay must be non-negative")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # dicts: epoch, train_loss, train_acc, val_acc
    best_epoch: int = 0
    best_val_accuracy: float = 0.0
    test_accuracy: float = float("nan")
    stopped_early: bool = False
    wall_time: float = 0.0
    n_train: int = 0
    n_val: int = 0
    n_test: int = 0
    test_indices: list = field(default_factory=list)

    def to_dict(self):
        return dataclasses.asdict(self)


# -- data split -------------------------------------------------------------

def stratified_indices(labels, fraction, seed):
    """Per-class random split of positions; returns ``(keep, held_out)`` sorted.

    Each class with n members contributes ``round(fraction * n)`` held-out
    items, clamped to ``[1, n - 1]``.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    keep, held = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            raise SplitError(f"class {c} has {len(idx)} sample(s); at least 2 are needed to split")
        idx = rng.permutation(idx)
        n_out = int(min(max(round(fraction * len(idx)), 1), len(idx) - 1))
        held.extend(idx[:n_out].tolist())
        keep.extend(idx[n_out:].tolist())
    return sorted(keep), sorted(held)


def prepare_train(sample, n_frames=TRAIN_FRAMES):
    return normalize_sequence(resample_frames(sample, n_frames))


def split_dataset(samples, test_fraction=0.2, seed=0, n_frames=TRAIN_FRAMES):
    """Stratified train/test split.

    Training samples are resampled to ``n_frames`` and normalized; test
    samples keep their native length and are only normalized.
    """
    train_idx, test_idx = stratified_indices([s.label for s in samples], test_fraction, seed)
    train = [prepare_train(samples[i], n_frames) for i in train_idx]
    test = [normalize_sequence(samples[i]) for i in test_idx]
    return train, test


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, config):
    """In-place Adam update with L2 weight decay folded into the gradient.

    ``params`` and ``grads`` are dicts of arrays; returns ``(params, state)``.
    """
    lr, lam = config.learning_rate, config.weight_decay
    b1, b2, eps = config.beta1, config.beta2, config.adam_eps
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {w.shape} for {name}")
        if lam:
            g = g + lam * w
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def clip_by_global_norm(grads, max_norm):
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm and total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


# -- batching ---------------------------------------------------------------

def _stack(samples):
    return np.stack([s.keypoints for s in samples]), np.array([s.label for s in samples])


def _pairwise_sum(items):
    while len(items) > 1:
        nxt = [{k: a[k] + b[k] for k in a} for a, b in zip(items[::2], items[1::2])]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


def batch_gradients(params, keypoints, labels, threads=1, pool=None):
    """Mean loss and gradients over one batch.

    With ``threads > 1`` the batch is cut into that many chunks whose
    summed gradients are combined by a pairwise tree, which matches the
    single-pass result to round-off.
    """
    n = len(labels)
    if threads <= 1 or n < 2:
        loss, grads, probs = mdl.loss_and_grads(params, keypoints, labels)
        return loss, grads, probs
    bounds = np.linspace(0, n, min(threads, n) + 1).astype(int)
    chunks = [(keypoints[a:b], labels[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]

    def work(chunk):
        kp, y = chunk
        loss, grads, probs = mdl.loss_and_grads(params, kp, y)
        w = len(y)
        return loss * w, {k: g * w for k, g in grads.items()}, probs

    results = list(pool.map(work, chunks)) if pool else [work(c) for c in chunks]
    grads = _pairwise_sum([r[1] for r in results])
    loss = sum(r[0] for r in results) / n
    return loss, {k: g / n for k, g in grads.items()}, np.concatenate([r[2] for r in results])


def predict_samples(params, samples):
    """Probability rows for samples of any lengths, in input order."""
    probs = np.empty((len(samples), params.config.n_classes))
    by_len = {}
    for i, s in enumerate(samples):
        by_len.setdefault(s.n_frames, []).append(i)
    for _, idx in sorted(by_len.items()):
        kp = np.stack([samples[i].keypoints for i in idx])
        probs[idx] = mdl.predict_proba(params, kp)
    return probs


def evaluate(params, samples):
    """Top-1 accuracy and confusion matrix (rows = true class) on normalized samples."""
    n_classes = params.config.n_classes
    confusion = np.zeros((n_classes, n_classes), dtype=int)
    if not samples:
        return float("nan"), confusion
    pred = predict_samples(params, samples).argmax(axis=1)
    for s, p in zip(samples, pred):
        confusion[s.label, p] += 1
    return float(np.trace(confusion) / len(samples)), confusion


# -- training ---------------------------------------------------------------

def _check_compat(model_config, train_config):
    if len(model_config.gcn_widths) != train_config.gcn_layers:
        raise ContractError(
            f"model has {len(model_config.gcn_widths)} GCN layers, train config says "
            f"{train_config.gcn_layers}")
    if model_config.depth != train_config.bilstm_depth:
        raise ContractError(
            f"model has BiLSTM depth {model_config.depth}, train config says "
            f"{train_config.bilstm_depth}")


def train(dataset, model_config, train_config, threads=1):
    """Train on raw samples; returns ``(best_params, TrainReport)``.

    The dataset is split into train/test, and a stratified validation
    subset is carved from the train part for early stopping. The returned
    parameters are those of the epoch with the best validation accuracy.
    """
    _check_compat(model_config, train_config)
    labels = [s.label for s in dataset]
    if max(labels) >= model_config.n_classes:
        raise ContractError(f"label {max(labels)} exceeds n_classes={model_config.n_classes}")
    cfg = train_config
    start = time.perf_counter()
    train_idx, test_idx = stratified_indices(labels, cfg.test_fraction, cfg.seed)
    if cfg.val_fraction > 0:
        keep, val = stratified_indices([labels[i] for i in train_idx], cfg.val_fraction, cfg.seed + 1)
        val_idx = [train_idx[i] for i in val]
        train_idx = [train_idx[i] for i in keep]
    else:
        val_idx = []
    train_set = [prepare_train(dataset[i], cfg.frames_per_sample) for i in train_idx]
    val_set = [prepare_train(dataset[i], cfg.frames_per_sample) for i in val_idx]
    test_set = [normalize_sequence(dataset[i]) for i in test_idx]

    params = mdl.init_params(model_config, cfg.seed)
    X, y = _stack(train_set)
    report = TrainReport(n_train=len(train_set), n_val=len(val_set), n_test=len(test_set),
                         test_indices=list(test_idx))
    best = params.copy()
    best_val = -1.0
    since_best = 0
    state = AdamState()
    rng = np.random.default_rng(cfg.seed + 2)
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    limits = threadpool_limits(1) if threads <= 1 else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(len(y))
            losses, correct = [], 0
            for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[lo:lo + cfg.batch_size]
                loss, grads, probs = batch_gradients(params, X[idx], y[idx], threads, pool)
                if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise TrainingError(f"non-finite loss or gradient at epoch {epoch}, batch {b}")
                grads, _ = clip_by_global_norm(grads, cfg.clip_norm)
                adam_step(params.arrays, grads, state, cfg)
                losses.append(loss * len(idx))
                correct += int(np.sum(probs.argmax(axis=1) == y[idx]))
            val_acc = evaluate(params, val_set)[0] if val_set else correct / len(y)
            row = {"epoch": epoch, "train_loss": float(sum(losses) / len(y)),
                   "train_acc": correct / len(y), "val_acc": float(val_acc)}
            report.epochs.append(row)
            logger.info("epoch %d loss %.4f train_acc %.3f val_acc %.3f",
                        epoch, row["train_loss"], row["train_acc"], row["val_acc"])
            # ties refresh the kept parameters but do not reset patience
            if val_acc >= best_val:
                best = params.copy()
                report.best_epoch = epoch
            if val_acc > best_val:
                best_val = val_acc
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.early_stop_patience:
                    report.stopped_early = True
                    break
    finally:
        if pool:
            pool.shutdown()
        if limits:
            limits.unregister()
    report.best_val_accuracy = float(max(best_val, 0.0))
    report.test_accuracy = evaluate(best, test_set)[0]
    report.wall_time = time.perf_counter() - start
    return best, report


# -- gradient check ---------------------------------------------------------

def grad_check_model(model_config=mdl.TINY_CONFIG, seed=0, n_frames=3, batch=2,
                     eps=1e-5, tolerance=1e-4, max_entries=256, corrupt_block=None):
    """Finite-difference check of every parameter block of the full model.

    ``corrupt_block`` flips the sign of that block's analytic gradient
    (fault injection for testing the checker itself).
    """
    rng = np.random.default_rng(seed)
    params = mdl.init_params(model_config, seed)
    # perturb biases away from zero so every term contributes
    for name, arr in params.arrays.items():
        arr += rng.normal(0.0, 0.1, size=arr.shape)
    kp = rng.uniform(0.0, 96.0, size=(batch, n_frames, 2, 21, 3))
    labels = rng.integers(0, model_config.n_classes, size=batch)
    _, grads, _ = mdl.loss_and_grads(params, kp, labels)
    if corrupt_block is not None:
        hit = [k for k in grads if mdl.param_block(k) == corrupt_block]
        if not hit:
            raise ContractError(f"no parameter block named {corrupt_block!r}")
        for k in hit:
            grads[k] = -grads[k]
    return nn_core.check_param_grads(
        lambda _: mdl.loss_value(params, kp, labels), params.arrays, grads,
        eps=eps, tolerance=tolerance, block_of=mdl.param_block,
        max_entries=max_entries, rng=np.random.default_rng(seed + 1))


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, params, train_config=None):
    """Write ``HGS1`` + header length + JSON header + little-endian float64 blocks."""
    header = {
        "model_config": params.config.to_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "blocks": [{"name": k, "shape": list(v.shape)} for k, v in params.arrays.items()],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for v in params.arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path, expected_config=None):
    """Returns ``(ModelParams, TrainConfig or None)``.

    Raises :class:`CheckpointError` if the file is malformed or its model
    config differs from ``expected_config``.
    """
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[4:12])
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        config = mdl.ModelConfig.from_dict(header["model_config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from None
    if expected_config is not None and expected_config != config:
        raise CheckpointError(
            f"{path}: checkpoint model config {config} does not match requested {expected_config}")
    tc = header.get("train_config")
    train_config = TrainConfig.from_dict(tc) if tc else None
    offset = 12 + hlen
    arrays = {}
    for block in header["blocks"]:
        shape = tuple(block["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated at block {block['name']}")
        arrays[block["name"]] = np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    expected = mdl.init_params(config, 0).arrays
    if {k: v.shape for k, v in expected.items()} != {k: v.shape for k, v in arrays.items()}:
        raise CheckpointError(f"{path}: parameter blocks do not match the model config")
    return mdl.ModelParams(config, arrays), train_config


# -- ablation ---------------------------------------------------------------

def architecture_name(depth):
    return "GCN-" + "-".join(["BiLSTM"] * depth) + "-Attention"


def parse_grid(text):
    """``"anatomical@2,finger:index@3,star@2"`` -> [(TopologyKind, depth), ...]."""
    cells = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        topo, _, depth = item.rpartition("@")
        if not topo:
            raise ContractError(f"grid cell {item!r} must look like <topology>@<depth>")
        cells.append((TopologyKind.parse(topo), int(depth)))
    if not cells:
        raise ContractError("empty ablation grid")
    return cells


DEFAULT_GRID = [(TopologyKind.parse(t), d) for t in ("anatomical", "finger:index", "star")
                for d in (2, 3)]


def ablate(dataset, grid, model_config, train_config, threads=1):
    """Train one model per (topology, depth) cell with a shared seed and split.

    Returns a list of row dicts with the :data:`ABLATION_COLUMNS` keys plus
    ``error`` (None on success). A failing cell gets an empty accuracy and
    the remaining cells still run.
    """
    if not grid:
        raise ContractError("ablation grid is empty")
    rows = []
    for kind, depth in grid:
        mc = model_config.replace(topology=str(kind), depth=depth)
        tc = train_config.replace(bilstm_depth=depth)
        widths = (*mc.fc_widths, mc.n_classes)
        row = {
            "topology": str(kind),
            "architecture": architecture_name(depth),
            "fc": f"{len(widths)} ({'-'.join(str(w) for w in widths)})",
            "hidden": f"{mc.hidden}-{mc.hidden}",
            "depth": depth,
            "seed": tc.seed,
            "accuracy": "",
            "error": None,
        }
        try:
            _, report = train(dataset, mc, tc, threads=threads)
            row["accuracy"] = repr(float(report.test_accuracy))
        except Exception as exc:  # one failing cell must not sink the grid
            logger.exception("ablation cell %s depth %d failed", kind, depth)
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def ablation_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ABLATION_COLUMNS, extrasaction="ignore",
                            lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
