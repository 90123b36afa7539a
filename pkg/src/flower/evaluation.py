"""Cosine trial scoring, EER, linear probes and the trial/score file formats."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression

from .encoder import EmbeddingRecord
from .errors import DomainError

log = logging.getLogger(__name__)


@dataclass
class Trial:
    enroll: str
    test: str
    is_target: bool
    score: float | None = None


def cosine_score(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DomainError("cosine score of a zero vector is undefined")
    return float(np.clip(np.dot(a / na, b / nb), -1.0, 1.0))


def det_points(scores: Sequence[float], is_target: Sequence[bool]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(thresholds, FAR, FRR)`` for accept-if-``score >= threshold``, ascending thresholds.

    The sweep runs over every distinct score plus ``+inf`` (reject all);
    the first point, at the lowest score, accepts everything.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(is_target, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-D sequences")
    n_tar = int(labels.sum())
    n_non = labels.size - n_tar
    if n_tar == 0 or n_non == 0:
        raise DomainError("EER needs at least one target and one non-target trial")
    thresholds = np.append(np.unique(scores), np.inf)
    tar = np.sort(scores[labels])
    non = np.sort(scores[~labels])
    # targets strictly below the threshold are rejected; non-targets at or above it are accepted
    frr = np.searchsorted(tar, thresholds, side="left") / n_tar
    far = (n_non - np.searchsorted(non, thresholds, side="left")) / n_non
    return thresholds, far, frr


def compute_eer(scores: Sequence[float], is_target: Sequence[bool]) -> float:
    """Rate where FAR and FRR cross, linearly interpolated between sweep points."""
    _, far, frr = det_points(scores, is_target)
    gap = far - frr  # non-increasing along the sweep, +1 at the start and -1 at the end
    k = int(np.argmax(gap <= 0))
    if gap[k] == 0:
        return float(far[k])
    g0, g1 = gap[k - 1], gap[k]
    lam = g0 / (g0 - g1)
    return float(far[k - 1] + lam * (far[k] - far[k - 1]))


def build_trials(records: Sequence[EmbeddingRecord], pairs_per_class: int, seed: int = 0) -> list[Trial]:
    """Per class: ``pairs_per_class`` same-class and as many cross-class pairs.

    Classes with fewer than two samples are skipped.
    """
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_class.setdefault(int(r.y), []).append(i)
    classes = sorted(by_class)
    trials: list[Trial] = []
    for c in classes:
        members = by_class[c]
        if len(members) < 2:
            log.warning("class %d has %d sample(s); skipped when building trials", c, len(members))
            continue
        others = [i for k in classes if k != c for i in by_class[k]]
        if not others:
            log.warning("class %d has no other class to pair against", c)
            continue
        for _ in range(pairs_per_class):
            a, b = rng.choice(len(members), size=2, replace=False)
            trials.append(Trial(records[members[a]].id, records[members[b]].id, True))
        for _ in range(pairs_per_class):
            a = members[int(rng.integers(len(members)))]
            b = others[int(rng.integers(len(others)))]
            trials.append(Trial(records[a].id, records[b].id, False))
    return trials


def score_trials(trials: Iterable[Trial], records: Sequence[EmbeddingRecord]) -> list[Trial]:
    table = {r.id: r.omega for r in records}
    out = []
    for t in trials:
        try:
            s = cosine_score(table[t.enroll], table[t.test])
        except KeyError as exc:
            raise KeyError(f"trial id {exc.args[0]!r} has no embedding") from None
        out.append(Trial(t.enroll, t.test, t.is_target, s))
    return out


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    degenerate: bool
    n_train: int
    n_test: int


def linear_probe(
    embeddings: np.ndarray,
    labels: Sequence[int],
    heldout_fraction: float = 0.3,
    seed: int = 0,
    tol: float = 1e-6,
    C: float = 1.0,
) -> ProbeResult:
    """Held-out accuracy of a multinomial logistic regression on standardised features."""
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("embeddings must be (N, D) with one label per row")
    if not 0 < heldout_fraction < 1:
        raise DomainError("heldout_fraction must lie in (0, 1)")
    N = X.shape[0]
    n_test = int(round(N * heldout_fraction))
    if n_test < 1 or N - n_test < 1:
        raise DomainError(f"cannot split {N} samples with heldout fraction {heldout_fraction}")
    perm = np.random.default_rng(seed).permutation(N)
    test, train = perm[:n_test], perm[n_test:]
    if np.unique(y).size < 2:
        return ProbeResult(1.0, True, train.size, test.size)
    if np.unique(y[train]).size < 2:
        raise DomainError("training split contains a single label")
    mu = X[train].mean(axis=0)
    sd = X[train].std(axis=0)
    sd[sd == 0] = 1.0
    Xs = (X - mu) / sd
    clf = LogisticRegression(C=C, tol=tol, max_iter=5000)
    clf.fit(Xs[train], y[train])
    acc = float(np.mean(clf.predict(Xs[test]) == y[test]))
    return ProbeResult(acc, False, train.size, test.size)


def write_trials(path: str | Path, trials: Iterable[Trial]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trials:
            fh.write(f"{t.enroll} {t.test} {int(t.is_target)}\n")


def write_scores(path: str | Path, trials: Iterable[Trial]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trials:
            fh.write(f"{t.enroll} {t.test} {int(t.is_target)} {t.score!r}\n")


def read_trials(path: str | Path) -> list[Trial]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (3, 4) or parts[2] not in ("0", "1"):
                raise ValueError(f"line {lineno}: expected 'enroll test {{0|1}} [score]'")
            score = float(parts[3]) if len(parts) == 4 else None
            out.append(Trial(parts[0], parts[1], parts[2] == "1", score))
    return out


def evaluate_records(records: Sequence[EmbeddingRecord], pairs_per_class: int, seed: int, heldout_fraction: float = 0.3) -> tuple[dict, list[Trial]]:
    """Trial EER plus class and nuisance probe accuracies for one embedding dump."""
    trials = score_trials(build_trials(records, pairs_per_class, seed), records)
    eer = compute_eer([t.score for t in trials], [t.is_target for t in trials])
    omegas = np.stack([r.omega for r in records])
    class_probe = linear_probe(omegas, [r.y for r in records], heldout_fraction, seed)
    nuisance_probe = linear_probe(omegas, [r.n for r in records], heldout_fraction, seed)
    report = {
        "eer": eer,
        "class_probe_acc": class_probe.accuracy,
        "nuisance_probe_acc": nuisance_probe.accuracy,
        "n_trials": len(trials),
    }
    for k, v in report.items():
        if isinstance(v, float) and not math.isfinite(v):
            raise ValueError(f"report field {k} is not finite")
    return report, trials


def report_line(report: dict) -> str:
    return json.dumps(report, sort_keys=True)
