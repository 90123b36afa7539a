import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flower.encoder import EmbeddingRecord
from flower.errors import DomainError
from flower.evaluation import (
    Trial,
    build_trials,
    compute_eer,
    cosine_score,
    det_points,
    evaluate_records,
    linear_probe,
    read_trials,
    report_line,
    score_trials,
    write_scores,
    write_trials,
)

HAND_TARGETS = [0.9, 0.8, 0.7, 0.3]
HAND_NONTARGETS = [0.6, 0.4, 0.2, 0.1]


def eer_of(targets, nontargets):
    return compute_eer(list(targets) + list(nontargets), [True] * len(targets) + [False] * len(nontargets))


def test_cosine_values():
    assert cosine_score([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    assert cosine_score([1.0, 0.0], [1.0, 1.0]) == pytest.approx(0.707107, abs=1e-6)
    assert cosine_score([2.0, -3.0], [2.0, -3.0]) == pytest.approx(1.0, abs=1e-15)
    assert cosine_score([1.0, 0.0], [0.0, 5.0]) == 0.0
    with pytest.raises(DomainError):
        cosine_score([0.0, 0.0], [1.0, 0.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_cosine_scale_invariance_and_symmetry(seed, a, b):
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=5), rng.normal(size=5)
    base = cosine_score(u, v)
    assert -1.0 <= base <= 1.0
    assert cosine_score(a * u, b * v) == pytest.approx(base, abs=1e-12)
    assert cosine_score(v, u) == base


def test_hand_derived_eer():
    assert eer_of(HAND_TARGETS, HAND_NONTARGETS) == 0.25


def test_separated_and_flipped():
    assert eer_of([0.9, 0.8], [0.1, 0.2]) == 0.0
    assert eer_of([0.1, 0.2], [0.9, 0.8]) == 1.0


def test_single_class_rejected():
    with pytest.raises(DomainError):
        compute_eer([0.1, 0.2], [True, True])
    with pytest.raises(DomainError):
        compute_eer([0.1, 0.2], [False, False])


def test_interpolated_crossing():
    # FAR/FRR cross between sweep points; interpolation gives the midpoint here
    assert eer_of([0.5, 0.9], [0.1, 0.6]) == pytest.approx(0.5, abs=1e-15)


def test_det_points_shape_and_monotonicity():
    thr, far, frr = det_points(HAND_TARGETS + HAND_NONTARGETS, [True] * 4 + [False] * 4)
    assert far[0] == 1.0 and frr[0] == 0.0 and far[-1] == 0.0 and frr[-1] == 1.0
    assert np.all(np.diff(far) <= 0) and np.all(np.diff(frr) >= 0)
    assert np.all(np.diff(thr) > 0)


@pytest.mark.parametrize("seed", range(100))
def test_eer_monotone_transform_invariance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 60))
    scores = rng.normal(size=n)
    labels = rng.random(n) < 0.5
    labels[0], labels[1] = True, False
    base = compute_eer(scores, labels)
    for f in (np.exp, lambda s: 3 * s - 7, lambda s: np.arctan(s) ** 3, lambda s: s ** 3 + s):
        assert compute_eer(f(scores), labels) == pytest.approx(base, abs=1e-12)


def test_random_scores_give_chance_eer():
    eers = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        labels = np.arange(2000) % 2 == 0
        eers.append(compute_eer(rng.random(2000), labels))
    assert abs(np.mean(eers) - 0.5) < 0.05
    assert all(abs(e - 0.5) < 0.1 for e in eers)


def test_ties_handled():
    assert eer_of([0.5, 0.5], [0.5, 0.5]) == pytest.approx(0.5)


def dump(ys, ns=None, dim=3, seed=0, offset=4.0):
    rng = np.random.default_rng(seed)
    ns = ns if ns is not None else [0] * len(ys)
    centres = rng.normal(size=(max(ys) + 1, dim)) * offset
    return [EmbeddingRecord(f"u{i}", y, n, centres[y] + rng.normal(size=dim)) for i, (y, n) in enumerate(zip(ys, ns))]


def test_trials_small_case():
    trials = build_trials(dump([0, 0, 1, 1]), pairs_per_class=1, seed=0)
    assert sum(t.is_target for t in trials) == 2 and sum(not t.is_target for t in trials) == 2
    ids = {"u0": 0, "u1": 0, "u2": 1, "u3": 1}
    for t in trials:
        assert t.enroll != t.test
        assert (ids[t.enroll] == ids[t.test]) == t.is_target


def test_trials_deterministic_and_counted():
    recs = dump([i % 5 for i in range(200)])
    a, b = build_trials(recs, 37, seed=9), build_trials(recs, 37, seed=9)
    assert a == b
    assert sum(t.is_target for t in a) == 5 * 37 and sum(not t.is_target for t in a) == 5 * 37
    assert build_trials(recs, 37, seed=10) != a


def test_singleton_class_skipped(caplog):
    with caplog.at_level("WARNING"):
        trials = build_trials(dump([0, 0, 1, 2, 2]), 2, seed=0)
    assert "class 1" in caplog.text
    assert {t.enroll for t in trials if t.is_target} <= {"u0", "u1", "u3", "u4"}


def test_scoring_and_file_round_trip(tmp_path):
    recs = dump([0, 0, 1, 1])
    trials = score_trials(build_trials(recs, 2, seed=1), recs)
    assert all(t.score is not None and -1 <= t.score <= 1 for t in trials)
    write_trials(tmp_path / "trials.txt", trials)
    write_scores(tmp_path / "scores.txt", trials)
    first = (tmp_path / "trials.txt").read_text().splitlines()[0].split()
    assert len(first) == 3 and first[2] in ("0", "1")
    back = read_trials(tmp_path / "scores.txt")
    assert back == trials
    plain = read_trials(tmp_path / "trials.txt")
    assert [t.score for t in plain] == [None] * len(trials)


def test_score_missing_id():
    with pytest.raises(KeyError):
        score_trials([Trial("u0", "nope", True)], dump([0, 0]))


def test_probe_constant_labels_degenerate():
    res = linear_probe(np.random.default_rng(0).normal(size=(20, 3)), [4] * 20)
    assert res.accuracy == 1.0 and res.degenerate


def test_probe_separable_blobs():
    rng = np.random.default_rng(1)
    X = np.concatenate([rng.normal(size=(200, 4)) - 3, rng.normal(size=(200, 4)) + 3])
    y = [0] * 200 + [1] * 200
    res = linear_probe(X, y, seed=2)
    assert res.accuracy > 0.99 and not res.degenerate
    assert res.n_test == 120 and res.n_train == 280


@pytest.mark.parametrize("k", [2, 4])
def test_probe_shuffled_labels_near_chance(k):
    rng = np.random.default_rng(k)
    X = rng.normal(size=(3000, 4))
    y = rng.integers(0, k, size=3000)
    assert abs(linear_probe(X, y, seed=0).accuracy - 1 / k) < 0.05


def test_probe_deterministic_and_errors():
    rng = np.random.default_rng(3)
    X, y = rng.normal(size=(60, 3)), rng.integers(0, 3, size=60)
    assert linear_probe(X, y, seed=5) == linear_probe(X, y, seed=5)
    with pytest.raises(DomainError):
        linear_probe(X[:1], y[:1], heldout_fraction=0.3)
    with pytest.raises(DomainError):
        linear_probe(X, y, heldout_fraction=1.0)


def test_evaluate_records_report():
    recs = dump([i % 4 for i in range(160)], ns=list(np.random.default_rng(7).integers(0, 2, 160)), dim=8, offset=6.0)
    report, trials = evaluate_records(recs, pairs_per_class=20, seed=0)
    assert set(report) == {"eer", "class_probe_acc", "nuisance_probe_acc", "n_trials"}
    assert report["n_trials"] == len(trials) == 160
    assert report["eer"] < 0.05 and report["class_probe_acc"] > 0.95
    # nuisance labels are unrelated to the embedding here
    assert abs(report["nuisance_probe_acc"] - 0.5) < 0.2
    assert json.loads(report_line(report)) == report
    assert "\n" not in report_line(report)
