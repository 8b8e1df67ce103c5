import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handseg import data_io
from handseg.data_io import (
    GestureSample,
    build_streams,
    concatenate,
    generate_synthetic,
    load_dataset,
    mean_frame_distance,
    normalize_keypoints,
    normalize_sequence,
    parse_record,
    resample_frames,
    resample_indices,
    save_dataset,
)
from handseg.errors import ContractError, DataError, ParseError, SchemaError


def sample(T, label=0, seed=0):
    return GestureSample(np.random.default_rng(seed).normal(size=(T, 2, 21, 3)), label)


def record(n_left=21, label=1):
    frame = {"left": [[0.0, 1.0, 2.0]] * n_left, "right": [[1.5, 2.5, 3.5]] * 21}
    return json.dumps({"label": label, "frames": [frame, frame]})


def test_load_two_lines(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(record() + "\n\n" + record(label=0) + "\n")
    got = load_dataset(path)
    assert [s.label for s in got] == [1, 0]
    assert got[0].keypoints.shape == (2, 2, 21, 3)
    assert got[0].right[1, 4].tolist() == [1.5, 2.5, 3.5]


def test_wrong_keypoint_count(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(record() + "\n" + record(n_left=20) + "\n")
    with pytest.raises(SchemaError, match="expected 21") as err:
        load_dataset(path)
    assert err.value.lineno == 2


@pytest.mark.parametrize("line", ["{not json", "[]", '{"label": 1}', '{"label": -1, "frames": []}',
                                  '{"label": true, "frames": []}', '{"label": 0, "frames": []}'])
def test_malformed_lines(line):
    with pytest.raises(ParseError):
        parse_record(line, 7)


def test_label_range_checked():
    with pytest.raises(SchemaError, match="out of range"):
        parse_record(record(label=5), 1, n_classes=5)


def test_roundtrip_is_byte_identical(tmp_path):
    data = generate_synthetic(3, 2, (2, 5), seed=1)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_dataset(data, a)
    back = load_dataset(a)
    assert all(np.array_equal(x.keypoints, y.keypoints) and x.label == y.label
               for x, y in zip(data, back))
    save_dataset(back, b)
    assert a.read_bytes() == b.read_bytes()


def test_normalize_endpoints_example():
    kp = np.zeros((2, 2, 21, 3))
    kp[1, 0, :, 0] = 10.0
    out = normalize_keypoints(kp)
    assert set(out[:, 0, :, 0].ravel()) == {0.0, 96.0}


def test_constant_axis_goes_to_midpoint():
    out = normalize_keypoints(np.full((4, 2, 21, 3), 7.0))
    assert np.all(out == 48.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.floats(1e-3, 1e4))
def test_normalize_range_and_idempotence(seed, T, scale):
    kp = np.random.default_rng(seed).normal(size=(T, 2, 21, 3)) * scale
    once = normalize_keypoints(kp)
    assert once.min() >= 0 and once.max() <= 96
    np.testing.assert_array_equal(once.min(axis=(0, 2)), 0.0)
    np.testing.assert_array_equal(once.max(axis=(0, 2)), 96.0)
    np.testing.assert_array_equal(normalize_keypoints(once), once)


def test_normalize_rejects_non_finite():
    kp = np.zeros((1, 2, 21, 3))
    kp[0, 1, 3, 2] = np.nan
    with pytest.raises(DataError):
        normalize_sequence(GestureSample(kp, 0))


def test_resample_examples():
    s = sample(50)
    np.testing.assert_array_equal(resample_frames(s).keypoints, s.keypoints)
    one = resample_frames(sample(1))
    assert one.n_frames == 50 and np.all(one.keypoints == one.keypoints[0])
    oracle = [min(range(99), key=lambda i: abs(i - k * 98 / 49)) for k in range(50)]
    assert resample_indices(99).tolist() == oracle == list(range(0, 99, 2))
    with pytest.raises(ContractError):
        resample_indices(10, 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.integers(2, 80))
def test_resample_keeps_order_and_endpoints(T, n):
    idx = resample_indices(T, n)
    assert len(idx) == n and idx[0] == 0 and idx[-1] == T - 1
    assert np.all(np.diff(idx) >= 0)


def test_concatenate_examples():
    cs = concatenate([sample(40, 3), sample(60, 5, seed=1)])
    assert cs.n_frames == 100
    assert cs.ground_truth == [(3, 0, 39), (5, 40, 99)]
    assert concatenate([sample(7, 2)]).ground_truth == [(2, 0, 6)]
    with pytest.raises(ContractError):
        concatenate([])


def test_spans_partition_random_concatenations():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        lengths = rng.integers(1, 20, size=rng.integers(1, 6))
        cs = concatenate([GestureSample(np.zeros((n, 2, 21, 3)), i) for i, n in enumerate(lengths)])
        covered = [t for _, a, b in cs.ground_truth for t in range(a, b + 1)]
        assert covered == list(range(cs.n_frames))


def test_generator_counts_and_lengths():
    data = generate_synthetic(10, 10, (40, 60), seed=3)
    assert len(data) == 100
    assert all(40 <= s.n_frames <= 60 for s in data)
    assert [s.label for s in data] == [c for c in range(10) for _ in range(10)]


def test_generator_determinism_and_order_independence():
    a = generate_synthetic(4, 3, seed=5)
    b = generate_synthetic(4, 3, seed=5)
    more = generate_synthetic(4, 5, seed=5)
    assert all(np.array_equal(x.keypoints, y.keypoints) for x, y in zip(a, b))
    kept = [more[c * 5 + i] for c in range(4) for i in range(3)]
    assert all(np.array_equal(x.keypoints, y.keypoints) for x, y in zip(a, kept))
    other = generate_synthetic(4, 3, seed=6)
    assert not np.array_equal(a[0].keypoints, other[0].keypoints)


def test_classes_are_separated_beyond_jitter():
    data = generate_synthetic(5, 4, seed=42)
    by = {c: [s for s in data if s.label == c] for c in range(5)}
    within = np.mean([mean_frame_distance(x, y) for c in by for x, y in itertools.combinations(by[c], 2)])
    for c1, c2 in itertools.combinations(range(5), 2):
        between = np.mean([mean_frame_distance(x, y) for x in by[c1] for y in by[c2]])
        assert between > within


def test_generator_rejects_bad_arguments():
    with pytest.raises(ContractError):
        generate_synthetic(1, 3)
    with pytest.raises(ContractError):
        generate_synthetic(3, 3, frames_range=(5, 4))


def test_build_streams_avoids_adjacent_repeats():
    data = generate_synthetic(3, 4, (5, 8), seed=0)
    streams = build_streams(data, 30, 10, seed=1)
    assert len(streams) == 30
    for cs in streams:
        labels = cs.labels
        assert len(labels) == 10
        assert all(a != b for a, b in zip(labels, labels[1:]))
    again = build_streams(data, 30, 10, seed=1)
    assert all(x.ground_truth == y.ground_truth for x, y in zip(streams, again))
    with pytest.raises(ContractError):
        build_streams([s for s in data if s.label == 0], 1, 2)


def test_sample_validation():
    with pytest.raises(SchemaError):
        GestureSample(np.zeros((3, 2, 20, 3)), 0)
    with pytest.raises(DataError):
        GestureSample(np.zeros((0, 2, 21, 3)), 0)
    assert data_io.TRAIN_FRAMES == 50
