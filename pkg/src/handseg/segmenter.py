"""Sliding-window post-processing that cuts a continuous stream into gestures.

A fixed-length window slides over the stream and every window is classified
on its own. Consecutive windows that agree on the top class are merged into
one segment; a segment is accepted when its mean top probability reaches
the acceptance threshold (0.51 by default). Runs shorter than
``min_consecutive`` windows are treated as transitions and dropped.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as mdl
from .data_io import normalize_keypoints
from .errors import ContractError


@dataclass(frozen=True)
class SegmenterConfig:
    window_len: int = 50
    stride: int = 5
    accept_threshold: float = 0.51
    min_consecutive: int = 2
    normalize_windows: bool = False  # streams are normally built from normalized samples

    def __post_init__(self):
        if self.window_len < 1 or self.stride < 1 or self.min_consecutive < 1:
            raise ContractError("window_len, stride and min_consecutive must be >= 1")
        if not self.accept_threshold > 0:
            raise ContractError("accept_threshold must be positive")


@dataclass
class SoftmaxTrace:
    starts: np.ndarray   # (N,) first frame of each window
    ends: np.ndarray     # (N,) last frame (inclusive)
    probs: np.ndarray    # (N, C)
    too_short: bool = False

    def __len__(self):
        return len(self.starts)

    @property
    def top_class(self):
        return self.probs.argmax(axis=1)

    @property
    def top_prob(self):
        return self.probs.max(axis=1)


@dataclass
class Segment:
    start: int
    end: int
    label: int
    confidence: float
    accepted: bool
    n_windows: int = 1
    mean_probs: np.ndarray | None = field(default=None, repr=False)


@dataclass
class SlotAlignment:
    slot: int
    gt_class: int
    gt_prob: float | None         # mean probability the segment gave the true class
    recognized_class: int | None
    confidence: float | None
    accepted: bool
    false_recognition: bool


@dataclass
class Score:
    false_recognitions: int
    avg_recognized_softmax: float
    alignment: list
    extra_segments: int = 0

    def to_dict(self):
        return {
            "false_recognitions": self.false_recognitions,
            "avg_recognized_softmax": self.avg_recognized_softmax,
            "extra_segments": self.extra_segments,
            "alignment": [vars(a) for a in self.alignment],
        }


def window_starts(n_frames, window_len, stride):
    """Start frames of the windows laid over a stream of ``n_frames``.

    Full windows start at 0, stride, 2*stride, ... If frames remain past
    the last full window, one more (partial) window at the next stride is
    kept when it holds at least half a window.
    """
    full = list(range(0, n_frames - window_len + 1, stride)) if n_frames >= window_len else []
    nxt = full[-1] + stride if full else 0
    covered = full[-1] + window_len if full else 0
    if covered < n_frames and nxt < n_frames and (n_frames - nxt) * 2 >= window_len:
        full.append(nxt)
    return full


def trace_stream(stream, params, cfg=SegmenterConfig()):
    """Classify every window of ``stream`` (a ContinuousSequence or (T, 2, 21, 3) array)."""
    kp = getattr(stream, "keypoints", stream)
    kp = np.asarray(kp, dtype=np.float64)
    n = len(kp)
    starts = window_starts(n, cfg.window_len, cfg.stride)
    n_classes = params.config.n_classes
    if not starts:
        empty = np.zeros(0, dtype=int)
        return SoftmaxTrace(empty, empty.copy(), np.zeros((0, n_classes)), too_short=True)
    ends = [min(s + cfg.window_len, n) - 1 for s in starts]
    probs = np.empty((len(starts), n_classes))
    by_len = {}
    for i, (s, e) in enumerate(zip(starts, ends)):
        by_len.setdefault(e - s + 1, []).append(i)
    for _, idx in sorted(by_len.items()):
        windows = [kp[starts[i]:ends[i] + 1] for i in idx]
        if cfg.normalize_windows:
            windows = [normalize_keypoints(w) for w in windows]
        probs[idx] = mdl.predict_proba(params, np.stack(windows))
    return SoftmaxTrace(np.array(starts), np.array(ends), probs)


def segment_trace(trace, cfg=SegmenterConfig()):
    """Merge same-class window runs into segments (see module docstring)."""
    segments = []
    if len(trace) == 0:
        return segments
    top = trace.top_class
    conf = trace.top_prob
    i = 0
    n = len(trace)
    while i < n:
        j = i
        while j + 1 < n and top[j + 1] == top[i]:
            j += 1
        run = slice(i, j + 1)
        if j - i + 1 >= cfg.min_consecutive:
            c = float(conf[run].mean())
            segments.append(Segment(
                start=int(trace.starts[i]), end=int(trace.ends[j]), label=int(top[i]),
                confidence=c, accepted=c >= cfg.accept_threshold, n_windows=j - i + 1,
                mean_probs=trace.probs[run].mean(axis=0)))
        i = j + 1
    return segments


def score_segments(segments, ground_truth):
    """Align segments to ground-truth slots by position and count false recognitions.

    ``ground_truth`` is the ordered list of true classes. A slot is a false
    recognition when its segment has another class, is not accepted, or is
    missing; every segment beyond the number of slots adds one more.
    """
    gt = list(ground_truth)
    if not gt:
        raise ContractError("ground truth must be non-empty")
    rows = []
    false = 0
    for k, g in enumerate(gt):
        if k < len(segments):
            s = segments[k]
            gt_prob = float(s.mean_probs[g]) if s.mean_probs is not None and g < len(s.mean_probs) else None
            bad = s.label != g or not s.accepted
            rows.append(SlotAlignment(k, int(g), gt_prob, s.label, s.confidence, s.accepted, bad))
        else:
            bad = True
            rows.append(SlotAlignment(k, int(g), None, None, None, False, True))
        false += bad
    extra = max(0, len(segments) - len(gt))
    aligned = [r.confidence for r in rows if r.confidence is not None]
    avg = float(np.mean(aligned)) if aligned else float("nan")
    return Score(false + extra, avg, rows, extra)


def ordered_accuracy(score):
    """Fraction of ground-truth slots whose aligned segment has the right class."""
    rows = score.alignment
    return sum(r.recognized_class == r.gt_class for r in rows) / len(rows)


TUNE_WINDOWS = (20, 25, 30, 35, 40, 45, 50)
TUNE_MIN_RUNS = (2, 3, 4, 5, 6)


def tune_segmenter(streams, params, windows=TUNE_WINDOWS, min_runs=TUNE_MIN_RUNS,
                   base=SegmenterConfig()):
    """Choose ``window_len`` and ``min_consecutive`` on development streams.

    Every (window, run length) pair is scored by its total false
    recognitions over ``streams``. Ties go to the pair whose neighbouring
    run lengths also do well, then to the longer window (closer to the
    training length), then to the shorter run length. Returns the chosen
    config and the ``{(window, run): false_recognitions}`` table.
    """
    streams = list(streams)
    if not streams:
        raise ContractError("tune_segmenter needs at least one stream")
    table = {}
    for w in windows:
        traces = [trace_stream(s, params, replace(base, window_len=w)) for s in streams]
        for m in min_runs:
            cfg = replace(base, window_len=w, min_consecutive=m)
            table[w, m] = sum(score_segments(segment_trace(t, cfg), s.labels).false_recognitions
                              for s, t in zip(streams, traces))

    def nearby(w, m):
        vals = [table[w, k] for k in (m - 1, m, m + 1) if (w, k) in table]
        return sum(vals) / len(vals)

    w, m = min(table, key=lambda k: (table[k], nearby(*k), -k[0], k[1]))
    return replace(base, window_len=w, min_consecutive=m), table


# -- report formats ---------------------------------------------------------

def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def trace_csv(trace):
    return _csv(("window_start", "top1_class", "top1_prob"),
                [(int(s), int(c), repr(float(p)))
                 for s, c, p in zip(trace.starts, trace.top_class, trace.top_prob)])


def trace_probs_csv(trace):
    n_classes = trace.probs.shape[1]
    return _csv(("window_start", *[f"p{k}" for k in range(n_classes)]),
                [(int(s), *[repr(float(p)) for p in row]) for s, row in zip(trace.starts, trace.probs)])


def segments_csv(segments):
    return _csv(("start_frame", "end_frame", "class", "confidence", "accepted"),
                [(s.start, s.end, s.label, repr(s.confidence), int(s.accepted)) for s in segments])


def score_json(score):
    return json.dumps(score.to_dict(), indent=2, sort_keys=True) + "\n"
