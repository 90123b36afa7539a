import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from flower.errors import DatasetParseError, ValidationError
from flower.synthdata import (
    DatasetHeader,
    GeneratorSpec,
    Utterance,
    factor_means,
    factor_mutual_information,
    load_dataset,
    read_dataset,
    sample_dataset,
    stack,
    write_dataset,
)


def test_zero_noise_frames_are_exact_factor_sums():
    spec = GeneratorSpec(num_classes=3, num_nuisance=2, frames=5, feat_dim=4, noise_std=0.0, seed=3)
    (u,) = sample_dataset(spec, 1)
    cm, nm = factor_means(spec)
    for t in range(spec.frames):
        np.testing.assert_array_equal(u.frames[t], cm[u.y] + nm[u.n])


def test_same_seed_is_bit_identical():
    spec = GeneratorSpec(seed=11, frames=3)
    a = sample_dataset(spec, 50)
    b = sample_dataset(spec, 50)
    assert a == b
    c = sample_dataset(GeneratorSpec(seed=12, frames=3), 50)
    assert a != c


def test_factor_means_are_scaled_unit_vectors():
    spec = GeneratorSpec(class_scale=3.0, nuisance_scale=0.5)
    cm, nm = factor_means(spec)
    np.testing.assert_allclose(np.linalg.norm(cm, axis=1), 3.0)
    np.testing.assert_allclose(np.linalg.norm(nm, axis=1), 0.5)


def test_linear_probe_on_frame_means_recovers_class():
    spec = GeneratorSpec(num_classes=2, num_nuisance=2, frames=20, feat_dim=16,
                         class_scale=3.0, nuisance_scale=3.0, noise_std=0.5, seed=5)
    data = sample_dataset(spec, 2000)
    x, y, _ = stack(data)
    feats = x.mean(axis=1)
    clf = LogisticRegression(max_iter=2000).fit(feats[:1500], y[:1500])
    assert clf.score(feats[1500:], y[1500:]) > 0.95


def test_factors_are_marginally_independent():
    spec = GeneratorSpec(frames=1, feat_dim=2, seed=9)
    data = sample_dataset(spec, 20000)
    _, y, n = stack(data)
    assert factor_mutual_information(y, n) < 0.01


def test_factor_mi_detects_dependence():
    y = np.array([0, 1] * 500)
    assert factor_mutual_information(y, y) == pytest.approx(np.log(2), abs=1e-12)


def test_zero_noise_groups_share_frames():
    spec = GeneratorSpec(num_classes=2, num_nuisance=2, frames=3, feat_dim=2, noise_std=0.0, seed=1)
    data = sample_dataset(spec, 40)
    groups = {}
    for u in data:
        groups.setdefault((u.y, u.n), []).append(u.frames)
    for frames in groups.values():
        for f in frames[1:]:
            np.testing.assert_array_equal(f, frames[0])


@pytest.mark.parametrize(
    "kwargs",
    [dict(feat_dim=5), dict(class_scale=-1.0), dict(noise_std=-0.1), dict(num_classes=1), dict(frames=0)],
)
def test_invalid_spec_rejected(kwargs):
    with pytest.raises(ValidationError):
        sample_dataset(GeneratorSpec(**kwargs), 3)


def test_count_must_be_positive():
    with pytest.raises(ValidationError):
        sample_dataset(GeneratorSpec(), 0)


def test_empty_dataset_round_trip(tmp_path):
    path = tmp_path / "empty.jsonl"
    write_dataset(path, [], DatasetHeader(T=2, F=4, C=2, Nn=2))
    lines = path.read_text().splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0]) == {"version": 1, "T": 2, "F": 4, "C": 2, "Nn": 2}
    assert read_dataset(path) == []


def test_single_tiny_utterance_round_trip(tmp_path):
    path = tmp_path / "one.jsonl"
    u = Utterance("a", 1, 0, np.array([[0.1, -3.0e-300]]))
    write_dataset(path, [u], DatasetHeader(T=1, F=2, C=2, Nn=2))
    assert len(path.read_text().splitlines()) == 2
    assert read_dataset(path) == [u]


def test_large_round_trip_is_bit_exact(tmp_path):
    spec = GeneratorSpec(frames=4, feat_dim=6, seed=2)
    data = sample_dataset(spec, 1000)
    path = tmp_path / "d.jsonl"
    write_dataset(path, data, spec)
    header, back = load_dataset(path)
    assert header == DatasetHeader.from_spec(spec)
    assert len(back) == 1000
    for a, b in zip(data, back):
        assert a.id == b.id and a.y == b.y and a.n == b.n
        assert a.frames.tobytes() == b.frames.tobytes()


def test_write_is_deterministic(tmp_path):
    spec = GeneratorSpec(frames=2, seed=4)
    for name in ("a", "b"):
        write_dataset(tmp_path / name, sample_dataset(spec, 20), spec)
    digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=4, max_size=4))
def test_float_bit_patterns_survive(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("rt") / "x.jsonl"
    u = Utterance("x", 0, 1, np.array(values, dtype=np.float64).reshape(2, 2))
    write_dataset(path, [u], DatasetHeader(T=2, F=2, C=2, Nn=2))
    assert read_dataset(path) == [u]


def _write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n")


HEADER = json.dumps({"version": 1, "T": 2, "F": 2, "C": 2, "Nn": 2})


@pytest.mark.parametrize(
    "record, fragment",
    [
        ({"id": "a", "y": 0, "frames": [[0, 0], [0, 0]]}, "missing field 'n'"),
        ({"id": "a", "y": 0, "n": 0, "frames": [[0, 0], [0]]}, "ragged"),
        ({"id": "a", "y": 0, "n": 0, "frames": [[0, 0]]}, "2 rows"),
        ({"id": "a", "y": 5, "n": 0, "frames": [[0, 0], [0, 0]]}, "y must be"),
    ],
)
def test_malformed_record_names_line(tmp_path, record, fragment):
    good = json.dumps({"id": "g", "y": 0, "n": 0, "frames": [[1.0, 2.0], [3.0, 4.0]]})
    path = tmp_path / "bad.jsonl"
    _write_lines(path, [HEADER, good, json.dumps(record)])
    with pytest.raises(DatasetParseError) as err:
        read_dataset(path)
    assert err.value.line == 3
    assert "line 3" in str(err.value)
    assert fragment in str(err.value)


def test_bad_header(tmp_path):
    path = tmp_path / "bad.jsonl"
    _write_lines(path, [json.dumps({"version": 1, "T": 2})])
    with pytest.raises(DatasetParseError) as err:
        read_dataset(path)
    assert err.value.line == 1
