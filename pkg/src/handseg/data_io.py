"""Gesture samples, the line-delimited dataset format and the synthetic generator.

A sample's keypoints are stored as one array of shape (T, 2, 21, 3): frame,
hand (0 = left, 1 = right), keypoint, xyz.

Dataset files are UTF-8 with one JSON object per line::

    {"label": 3, "frames": [{"left": [[x, y, z], ...21], "right": [...]}, ...]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, ParseError, SchemaError
from .hand_graph import JOINTS_PER_FINGER, N_NODES, FingerId

COORD_MAX = 96.0
TRAIN_FRAMES = 50


@dataclass
class GestureSample:
    keypoints: np.ndarray  # (T, 2, 21, 3)
    label: int

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        if self.keypoints.ndim != 4 or self.keypoints.shape[1:] != (2, N_NODES, 3):
            raise SchemaError(f"expected keypoints (T, 2, {N_NODES}, 3), got {self.keypoints.shape}")
        if len(self.keypoints) == 0:
            raise DataError("a gesture sample needs at least one frame")
        self.label = int(self.label)

    @property
    def n_frames(self):
        return len(self.keypoints)

    @property
    def left(self):
        return self.keypoints[:, 0]

    @property
    def right(self):
        return self.keypoints[:, 1]


@dataclass
class ContinuousSequence:
    keypoints: np.ndarray
    ground_truth: list = field(default_factory=list)  # [(label, start, end_inclusive), ...]

    @property
    def n_frames(self):
        return len(self.keypoints)

    @property
    def labels(self):
        return [lab for lab, _, _ in self.ground_truth]


# -- file format ------------------------------------------------------------

def _parse_hand(obj, lineno, where):
    if not isinstance(obj, list):
        raise SchemaError(f"{where}: expected a list of {N_NODES} triples", lineno)
    if len(obj) != N_NODES:
        raise SchemaError(f"{where}: expected {N_NODES} keypoints, got {len(obj)}", lineno)
    for p in obj:
        if not isinstance(p, list) or len(p) != 3:
            raise SchemaError(f"{where}: every keypoint must be an [x, y, z] triple", lineno)
    try:
        return np.array(obj, dtype=np.float64)
    except (TypeError, ValueError):
        raise SchemaError(f"{where}: coordinates must be numbers", lineno) from None


def parse_record(line, lineno=None, n_classes=None):
    """Parse one dataset line into a :class:`GestureSample`."""
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
    if not isinstance(rec, dict) or "label" not in rec or "frames" not in rec:
        raise SchemaError("record needs 'label' and 'frames'", lineno)
    label = rec["label"]
    if not isinstance(label, int) or isinstance(label, bool) or label < 0:
        raise SchemaError(f"label must be a non-negative integer, got {label!r}", lineno)
    if n_classes is not None and label >= n_classes:
        raise SchemaError(f"label {label} out of range for {n_classes} classes", lineno)
    frames = rec["frames"]
    if not isinstance(frames, list) or not frames:
        raise SchemaError("'frames' must be a non-empty list", lineno)
    kp = np.empty((len(frames), 2, N_NODES, 3))
    for t, fr in enumerate(frames):
        if not isinstance(fr, dict) or "left" not in fr or "right" not in fr:
            raise SchemaError(f"frame {t} needs 'left' and 'right'", lineno)
        kp[t, 0] = _parse_hand(fr["left"], lineno, f"frame {t} left")
        kp[t, 1] = _parse_hand(fr["right"], lineno, f"frame {t} right")
    return GestureSample(kp, label)


def format_record(sample):
    """Canonical one-line JSON for a sample (shortest round-trip float repr)."""
    frames = [{"left": sample.keypoints[t, 0].tolist(), "right": sample.keypoints[t, 1].tolist()}
              for t in range(sample.n_frames)]
    return json.dumps({"label": int(sample.label), "frames": frames}, separators=(",", ":"))


def load_dataset(path, n_classes=None):
    """Read every sample in a dataset file. Blank lines are skipped."""
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                samples.append(parse_record(line, lineno, n_classes))
    return samples


def save_dataset(samples, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(format_record(s))
            fh.write("\n")


# -- preprocessing ----------------------------------------------------------

def normalize_keypoints(kp):
    """Min-max map each hand/axis of a (T, 2, 21, 3) array onto [0, 96].

    The min and max run over all frames and keypoints; an axis with no
    spread maps to 48.
    """
    kp = np.asarray(kp, dtype=np.float64)
    if not np.all(np.isfinite(kp)):
        raise DataError("non-finite keypoint coordinate")
    lo = kp.min(axis=(0, 2), keepdims=True)
    hi = kp.max(axis=(0, 2), keepdims=True)
    span = hi - lo
    flat = span == 0
    scaled = (kp - lo) / np.where(flat, 1.0, span) * COORD_MAX
    # pin the endpoints so a second pass is an exact fixed point
    scaled = np.clip(scaled, 0.0, COORD_MAX)
    return np.where(flat, COORD_MAX / 2, scaled)


def normalize_sequence(sample):
    return GestureSample(normalize_keypoints(sample.keypoints), sample.label)


def resample_indices(n_frames, n=TRAIN_FRAMES):
    """Frame indices ``round(k (T-1) / (n-1))`` for ``k = 0..n-1`` (halves round up)."""
    if n <= 0:
        raise ContractError("resample target must be at least one frame")
    if n_frames <= 0:
        raise DataError("cannot resample an empty sequence")
    if n == 1:
        return np.zeros(1, dtype=int)
    k = np.arange(n)
    return np.floor(k * (n_frames - 1) / (n - 1) + 0.5).astype(int)


def resample_frames(sample, n=TRAIN_FRAMES):
    idx = resample_indices(sample.n_frames, n)
    return GestureSample(sample.keypoints[idx], sample.label)


def concatenate(samples):
    """Append samples back to back with no smoothing; record their spans."""
    samples = list(samples)
    if not samples:
        raise ContractError("concatenate needs at least one sample")
    spans = []
    start = 0
    for s in samples:
        spans.append((s.label, start, start + s.n_frames - 1))
        start += s.n_frames
    kp = np.concatenate([s.keypoints for s in samples], axis=0)
    return ContinuousSequence(kp, spans)


def build_streams(samples, n_streams, per_stream, seed=0):
    """Draw ``n_streams`` continuous sequences of ``per_stream`` samples each.

    Within a stream no class repeats while unused classes remain, so two
    neighbouring gestures never share a label.
    """
    by_class = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    classes = sorted(by_class)
    if len(classes) < 2 and per_stream > 1:
        raise ContractError("streams of several gestures need at least two classes")
    rng = np.random.default_rng(seed)
    streams = []
    for _ in range(n_streams):
        chosen = []
        pool = []
        while len(chosen) < per_stream:
            if not pool:
                pool = list(rng.permutation(classes))
                if chosen and pool[0] == chosen[-1].label:
                    pool.append(pool.pop(0))
            c = pool.pop(0)
            group = by_class[c]
            chosen.append(group[int(rng.integers(len(group)))])
        streams.append(concatenate(chosen))
    return streams


# -- synthetic data ---------------------------------------------------------

# canonical right hand in hand-length units: palm at the origin, fingers along +y
_BASES = {
    FingerId.THUMB: (-0.30, 0.20, 0.0),
    FingerId.INDEX: (-0.16, 0.62, 0.0),
    FingerId.MIDDLE: (0.00, 0.65, 0.0),
    FingerId.RING: (0.14, 0.60, 0.0),
    FingerId.LITTLE: (0.27, 0.52, 0.0),
}
_DIRECTIONS = {
    FingerId.THUMB: (-0.70, 0.71, 0.0),
    FingerId.INDEX: (-0.12, 0.99, 0.0),
    FingerId.MIDDLE: (0.00, 1.00, 0.0),
    FingerId.RING: (0.12, 0.99, 0.0),
    FingerId.LITTLE: (0.25, 0.97, 0.0),
}
_SEGMENTS = (0.25, 0.18, 0.14)
_NORMAL = np.array([0.0, 0.0, 1.0])
_RAW_SCALE = 100.0
_TWO_PI = 2.0 * np.pi


def _rng(*key):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


@dataclass
class _HandTemplate:
    flex_base: np.ndarray   # (5, 3) class handshape: mean flexion per bending joint
    flex_amp: np.ndarray    # (5, 3)
    flex_phase: np.ndarray  # (5, 3)
    flex_freq: float        # cycles per gesture
    rot_base: np.ndarray    # (2,) class hand orientation about z and about x
    rot_amp: np.ndarray     # (2,)
    rot_phase: np.ndarray
    rot_freq: float
    wrist_amp: np.ndarray   # (3,)
    wrist_phase: np.ndarray
    wrist_freq: np.ndarray


def _draw_template(rng):
    return _HandTemplate(
        flex_base=rng.uniform(0.0, 1.5, size=(5, 3)),
        flex_amp=rng.uniform(0.05, 0.15, size=(5, 3)),
        flex_phase=rng.uniform(0, _TWO_PI, size=(5, 3)),
        flex_freq=float(rng.uniform(1.5, 3.0)),
        rot_base=rng.uniform(-1.0, 1.0, size=2),
        rot_amp=rng.uniform(0.05, 0.15, size=2),
        rot_phase=rng.uniform(0, _TWO_PI, size=2),
        rot_freq=float(rng.uniform(1.0, 2.5)),
        wrist_amp=rng.uniform(0.05, 0.15, size=3),
        wrist_phase=rng.uniform(0, _TWO_PI, size=3),
        wrist_freq=rng.uniform(1.0, 2.5, size=3),
    )


def _jitter(t, rng, rel=0.10):
    """Per-sample copy of a template with amplitudes scaled by up to +-10%
    and phases shifted by up to +-10% of pi."""
    def amp(a):
        return a * (1.0 + rng.uniform(-rel, rel, size=np.shape(a)))

    def ph(p):
        return p + rng.uniform(-rel, rel, size=np.shape(p)) * np.pi

    return _HandTemplate(
        flex_base=t.flex_base, flex_amp=amp(t.flex_amp), flex_phase=ph(t.flex_phase),
        flex_freq=t.flex_freq, rot_base=t.rot_base, rot_amp=amp(t.rot_amp), rot_phase=ph(t.rot_phase),
        rot_freq=t.rot_freq, wrist_amp=amp(t.wrist_amp), wrist_phase=ph(t.wrist_phase),
        wrist_freq=t.wrist_freq)


def _render_hand(t, u):
    """Local-to-world keypoints (T, 21, 3) of one right hand over times ``u`` in [0, 1]."""
    T = len(u)
    pts = np.zeros((T, N_NODES, 3))
    angles = t.flex_base[None] + t.flex_amp[None] * np.sin(
        _TWO_PI * t.flex_freq * u[:, None, None] + t.flex_phase[None])
    cum = np.cumsum(angles, axis=2)  # (T, 5, 3)
    for f in FingerId:
        nodes = f.nodes
        base = np.array(_BASES[f])
        d = np.array(_DIRECTIONS[f])
        pts[:, nodes[0]] = base
        pos = np.broadcast_to(base, (T, 3)).copy()
        for k in range(JOINTS_PER_FINGER - 1):
            phi = cum[:, f, k][:, None]
            pos = pos + _SEGMENTS[k] * (np.cos(phi) * d - np.sin(phi) * _NORMAL)
            pts[:, nodes[k + 1]] = pos
    rz = t.rot_base[0] + t.rot_amp[0] * np.sin(_TWO_PI * t.rot_freq * u + t.rot_phase[0])
    rx = t.rot_base[1] + t.rot_amp[1] * np.sin(_TWO_PI * t.rot_freq * u + t.rot_phase[1])
    cz, sz, cx, sx = np.cos(rz), np.sin(rz), np.cos(rx), np.sin(rx)
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    x1 = cz[:, None] * x - sz[:, None] * y
    y1 = sz[:, None] * x + cz[:, None] * y
    y2 = cx[:, None] * y1 - sx[:, None] * z
    z2 = sx[:, None] * y1 + cx[:, None] * z
    world = np.stack([x1, y2, z2], axis=-1)
    wrist = t.wrist_amp * np.sin(_TWO_PI * t.wrist_freq * u[:, None] + t.wrist_phase)
    return world + wrist[:, None, :]


def generate_synthetic(n_classes, samples_per_class, frames_range=(40, 60), seed=0, noise=0.05):
    """Seeded synthetic two-hand gesture dataset in raw (unnormalized) units.

    Every class owns a template per hand: a fixed handshape and orientation
    with small periodic finger flexion, hand rotation and wrist motion on
    top. Each sample jitters the template's amplitudes and phases by at most
    10%, starts at a random point of the periodic motion, draws its length
    uniformly from ``frames_range`` (inclusive) and adds Gaussian coordinate
    noise of standard deviation ``noise`` hand-lengths. Every sample has its
    own random stream keyed by ``(seed, class, index)``, so output does not
    depend on generation order and raising ``samples_per_class`` only
    appends new samples.

    Returns samples ordered by class, then index.
    """
    if n_classes < 2:
        raise ContractError("need at least two classes")
    lo, hi = (int(v) for v in frames_range)
    if not 1 <= lo <= hi:
        raise ContractError(f"bad frames_range {frames_range}")
    samples = []
    for c in range(n_classes):
        crng = _rng(seed, 0, c)
        templates = (_draw_template(crng), _draw_template(crng))
        for i in range(samples_per_class):
            srng = _rng(seed, 1, c, i)
            T = int(srng.integers(lo, hi + 1))
            # the clip catches the periodic motion at a random point in time
            u = (np.linspace(0.0, 1.0, T) if T > 1 else np.zeros(1)) + srng.uniform(0.0, 1.0)
            kp = np.empty((T, 2, N_NODES, 3))
            for hand, tmpl in enumerate(templates):
                pts = _render_hand(_jitter(tmpl, srng), u)
                if hand == 0:
                    pts[..., 0] = -pts[..., 0]  # left hand is the mirror image
                pts = pts + srng.normal(0.0, noise, size=pts.shape)
                kp[:, hand] = pts * _RAW_SCALE + srng.uniform(100.0, 400.0, size=3)
            samples.append(GestureSample(kp, c))
    return samples


def mean_frame_distance(a, b):
    """Mean per-keypoint Euclidean distance between two samples after
    resampling both to a common length and normalizing them."""
    n = max(a.n_frames, b.n_frames)
    ka = normalize_keypoints(resample_frames(a, n).keypoints)
    kb = normalize_keypoints(resample_frames(b, n).keypoints)
    return float(np.linalg.norm(ka - kb, axis=-1).mean())

