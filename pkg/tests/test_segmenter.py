import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handseg import model as mdl
from handseg.data_io import concatenate, generate_synthetic, normalize_sequence
from handseg.errors import ContractError
from handseg.segmenter import (
    Segment,
    SegmenterConfig,
    SoftmaxTrace,
    ordered_accuracy,
    score_json,
    score_segments,
    segment_trace,
    segments_csv,
    trace_csv,
    trace_probs_csv,
    trace_stream,
    tune_segmenter,
    window_starts,
)


def make_trace(rows, window=10, stride=5):
    probs = np.asarray(rows, dtype=float)
    starts = np.arange(len(probs)) * stride
    return SoftmaxTrace(starts, starts + window - 1, probs)


def peaked(n_classes, cls, p):
    row = np.full(n_classes, (1 - p) / (n_classes - 1))
    row[cls] = p
    return row


def seg(label, conf=0.9, accepted=True, start=0):
    return Segment(start, start + 9, label, conf, accepted)


def starts_oracle(n, w, s):
    # every stride position whose window fits, then one partial window if it holds >= w/2 frames
    out = [k for k in range(0, n, s) if k + w <= n]
    nxt = out[-1] + s if out else 0
    if (not out or out[-1] + w < n) and nxt < n and 2 * (n - nxt) >= w:
        out.append(nxt)
    return out


def test_window_examples():
    assert window_starts(100, 50, 5) == list(range(0, 51, 5))
    assert len(window_starts(100, 50, 5)) == 11
    assert window_starts(50, 50, 5) == [0]
    assert window_starts(30, 50, 5) == [0]
    assert window_starts(24, 50, 5) == []


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 200), st.integers(1, 60), st.integers(1, 20))
def test_window_starts_match_oracle(n, w, s):
    assert window_starts(n, w, s) == starts_oracle(n, w, s)


@pytest.fixture(scope="module")
def tiny_params():
    return mdl.init_params(mdl.TINY_CONFIG.replace(n_classes=3), 0)


def test_trace_rows_sum_to_one(tiny_params):
    data = [normalize_sequence(s) for s in generate_synthetic(3, 1, (12, 15), seed=0)]
    stream = concatenate(data)
    cfg = SegmenterConfig(window_len=10, stride=3)
    trace = trace_stream(stream, tiny_params, cfg)
    assert trace.starts.tolist() == window_starts(stream.n_frames, 10, 3)
    assert np.all(np.abs(trace.probs.sum(axis=1) - 1) < 1e-9)
    assert np.all(trace.ends - trace.starts <= 9)
    # the last row may be a partial window and must equal classifying that slice alone
    s, e = trace.starts[-1], trace.ends[-1]
    alone = mdl.predict_proba(tiny_params, stream.keypoints[s:e + 1])[0]
    np.testing.assert_allclose(trace.probs[-1], alone, atol=1e-12)


def test_short_stream_gives_empty_flagged_trace(tiny_params):
    trace = trace_stream(np.zeros((4, 2, 21, 3)), tiny_params, SegmenterConfig(window_len=10))
    assert len(trace) == 0 and trace.too_short
    assert segment_trace(trace) == []


def test_single_run_merge():
    trace = make_trace([peaked(4, 2, 0.99)] * 7)
    segs = segment_trace(trace)
    assert len(segs) == 1
    s = segs[0]
    assert (s.start, s.end, s.label, s.accepted, s.n_windows) == (0, 39, 2, True, 7)
    assert abs(s.confidence - 0.99) < 1e-12


def test_low_confidence_run_is_unaccepted():
    trace = make_trace([peaked(10, 8, 0.35)] * 5)
    segs = segment_trace(trace)
    assert len(segs) == 1
    assert segs[0].label == 8 and not segs[0].accepted
    assert abs(segs[0].confidence - 0.35) < 1e-12


def test_isolated_windows_are_dropped():
    rows = [peaked(3, 0, 0.9)] * 3 + [peaked(3, 1, 0.9)] + [peaked(3, 2, 0.8)] * 2
    segs = segment_trace(make_trace(rows), SegmenterConfig(min_consecutive=2))
    assert [(s.label, s.start, s.end) for s in segs] == [(0, 0, 19), (2, 20, 34)]


def test_score_perfect_stream():
    segs = [seg(c, 0.99, start=10 * c) for c in range(10)]
    score = score_segments(segs, list(range(10)))
    assert score.false_recognitions == 0
    assert abs(score.avg_recognized_softmax - 0.99) < 1e-12
    assert len(score.alignment) == 10 and not any(r.false_recognition for r in score.alignment)
    assert ordered_accuracy(score) == 1.0


def test_one_mismatch_in_hundred():
    gt = [k % 7 for k in range(100)]
    segs = [seg(g) for g in gt]
    segs[40] = seg((gt[40] + 1) % 7)
    assert score_segments(segs, gt).false_recognitions == 1


def test_unaccepted_wrong_slot_example():
    segs = [seg(8, 0.35, accepted=False), seg(3, 0.99), seg(5, 0.70)]
    score = score_segments(segs, [18, 3, 5])
    assert score.false_recognitions == 1
    row = score.alignment[0]
    assert (row.gt_class, row.recognized_class, row.confidence) == (18, 8, 0.35)
    assert abs(score.avg_recognized_softmax - (0.35 + 0.99 + 0.70) / 3) < 1e-12


def test_missing_and_extra_segments():
    gt = [1, 2, 3]
    short = score_segments([seg(1), seg(2)], gt)
    assert short.false_recognitions == 1 and short.alignment[2].recognized_class is None
    long = score_segments([seg(1), seg(2), seg(3), seg(4), seg(5)], gt)
    assert long.false_recognitions == 2 and long.extra_segments == 2
    with pytest.raises(ContractError):
        score_segments([], [])


traces = st.integers(0, 2**32 - 1).map(lambda seed: make_trace(
    np.random.default_rng(seed).dirichlet(np.full(3, 0.3), size=np.random.default_rng(seed).integers(0, 40))))


@settings(max_examples=100, deadline=None)
@given(traces, st.floats(0.01, 1.0), st.floats(0.01, 1.0), st.integers(1, 4))
def test_segment_invariants(trace, t1, t2, m):
    lo, hi = sorted((t1, t2))
    a = segment_trace(trace, SegmenterConfig(accept_threshold=lo, min_consecutive=m))
    b = segment_trace(trace, SegmenterConfig(accept_threshold=hi, min_consecutive=m))
    assert sum(s.accepted for s in b) <= sum(s.accepted for s in a)
    assert all(not s.accepted for s in segment_trace(trace, SegmenterConfig(accept_threshold=1.01)))
    for s in a:
        assert s.start <= s.end
        assert (s.confidence >= lo) == s.accepted
    firsts = [s.start for s in a]
    assert firsts == sorted(set(firsts))
    again = segment_trace(trace, SegmenterConfig(accept_threshold=lo, min_consecutive=m))
    key = [(s.start, s.end, s.label, s.confidence, s.accepted) for s in a]
    assert [(s.start, s.end, s.label, s.confidence, s.accepted) for s in again] == key


def test_report_formats():
    trace = make_trace([peaked(3, 1, 0.75)] * 3)
    rows = list(csv.reader(io.StringIO(trace_csv(trace))))
    assert rows[0] == ["window_start", "top1_class", "top1_prob"]
    assert rows[1] == ["0", "1", "0.75"]
    assert trace_probs_csv(trace).splitlines()[0] == "window_start,p0,p1,p2"
    segs = segment_trace(trace)
    assert segments_csv(segs).splitlines() == ["start_frame,end_frame,class,confidence,accepted",
                                              "0,19,1,0.75,1"]
    score = json.loads(score_json(score_segments(segs, [1])))
    assert score["false_recognitions"] == 0 and score["avg_recognized_softmax"] == 0.75
    assert score["alignment"][0]["recognized_class"] == 1


def test_config_validation():
    for bad in ({"window_len": 0}, {"stride": 0}, {"accept_threshold": 0.0}, {"min_consecutive": 0}):
        with pytest.raises(ContractError):
            SegmenterConfig(**bad)
    assert SegmenterConfig() == SegmenterConfig(50, 5, 0.51, 2)


def test_tune_segmenter(tiny_params):
    data = [normalize_sequence(s) for s in generate_synthetic(3, 2, (12, 16), seed=2)]
    streams = [concatenate(data[:3]), concatenate(data[3:])]
    cfg, table = tune_segmenter(streams, tiny_params, windows=(8, 10), min_runs=(1, 2),
                                base=SegmenterConfig(stride=2))
    assert set(table) == {(8, 1), (8, 2), (10, 1), (10, 2)}
    assert table[cfg.window_len, cfg.min_consecutive] == min(table.values())
    assert cfg.stride == 2
    with pytest.raises(ContractError):
        tune_segmenter([], tiny_params)
