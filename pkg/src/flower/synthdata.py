"""Factor-controlled synthetic utterances and their line-oriented file format.

Every utterance is a ``T x F`` frame matrix built from a class mean, a
nuisance mean and per-frame Gaussian noise::

    frames[t] = class_mean[y] + nuisance_mean[n] + noise[t]

The class label ``y`` is the training target; the nuisance label ``n`` is
what a regularised embedding should forget.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DatasetParseError, ValidationError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class GeneratorSpec:
    num_classes: int = 8
    num_nuisance: int = 4
    frames: int = 20
    feat_dim: int = 16
    class_scale: float = 2.0
    nuisance_scale: float = 2.0
    noise_std: float = 0.5
    seed: int = 0

    def validate(self) -> "GeneratorSpec":
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.num_nuisance < 2:
            raise ValidationError("num_nuisance must be >= 2")
        if self.frames < 1:
            raise ValidationError("frames must be >= 1")
        if self.feat_dim < 2 or self.feat_dim % 2:
            raise ValidationError("feat_dim must be even and >= 2")
        for key in ("class_scale", "nuisance_scale", "noise_std"):
            value = getattr(self, key)
            if not (math.isfinite(value) and value >= 0):
                raise ValidationError(f"{key} must be a finite non-negative number")
        return self


@dataclass(frozen=True)
class DatasetHeader:
    T: int
    F: int
    C: int
    Nn: int
    version: int = FORMAT_VERSION

    @classmethod
    def from_spec(cls, spec: GeneratorSpec) -> "DatasetHeader":
        return cls(T=spec.frames, F=spec.feat_dim, C=spec.num_classes, Nn=spec.num_nuisance)


@dataclass(eq=False)
class Utterance:
    id: str
    y: int
    n: int
    frames: np.ndarray

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.id == other.id
            and self.y == other.y
            and self.n == other.n
            and self.frames.shape == other.frames.shape
            and self.frames.dtype == other.frames.dtype
            and self.frames.tobytes() == other.frames.tobytes()
        )

    def __repr__(self) -> str:
        return f"Utterance(id={self.id!r}, y={self.y}, n={self.n}, frames={self.frames.shape})"


def _unit_means(rng: np.random.Generator, count: int, dim: int, scale: float) -> np.ndarray:
    raw = rng.standard_normal((count, dim))
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    # a zero draw has probability zero, guard it anyway
    norms[norms == 0] = 1.0
    return scale * raw / norms


def factor_means(spec: GeneratorSpec) -> tuple[np.ndarray, np.ndarray]:
    """Class and nuisance mean vectors for ``spec`` (determined by its seed)."""
    rng = np.random.default_rng(spec.seed)
    class_means = _unit_means(rng, spec.num_classes, spec.feat_dim, spec.class_scale)
    nuisance_means = _unit_means(rng, spec.num_nuisance, spec.feat_dim, spec.nuisance_scale)
    return class_means, nuisance_means


def sample_dataset(spec: GeneratorSpec, count: int) -> list[Utterance]:
    spec.validate()
    if count < 1:
        raise ValidationError("count must be >= 1")
    rng = np.random.default_rng(spec.seed)
    class_means = _unit_means(rng, spec.num_classes, spec.feat_dim, spec.class_scale)
    nuisance_means = _unit_means(rng, spec.num_nuisance, spec.feat_dim, spec.nuisance_scale)
    ys = rng.integers(0, spec.num_classes, size=count)
    ns = rng.integers(0, spec.num_nuisance, size=count)
    noise = rng.standard_normal((count, spec.frames, spec.feat_dim)) * spec.noise_std
    width = max(6, len(str(count - 1)))
    out = []
    for i in range(count):
        y, n = int(ys[i]), int(ns[i])
        frames = class_means[y] + nuisance_means[n] + noise[i]
        out.append(Utterance(id=f"utt-{i:0{width}d}", y=y, n=n, frames=frames))
    return out


def stack(utterances: Sequence[Utterance]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Frames ``(N, T, F)``, class labels and nuisance labels as arrays."""
    if not utterances:
        raise ValidationError("cannot stack an empty dataset")
    x = np.stack([u.frames for u in utterances])
    y = np.array([u.y for u in utterances], dtype=np.int64)
    n = np.array([u.n for u in utterances], dtype=np.int64)
    return x, y, n


def infer_header(utterances: Sequence[Utterance]) -> DatasetHeader:
    if not utterances:
        raise ValidationError("an empty dataset needs an explicit header")
    T, F = utterances[0].frames.shape
    return DatasetHeader(
        T=T,
        F=F,
        C=max(u.y for u in utterances) + 1,
        Nn=max(u.n for u in utterances) + 1,
    )


def write_dataset(
    path: str | Path,
    utterances: Iterable[Utterance],
    header: DatasetHeader | GeneratorSpec | None = None,
) -> None:
    utterances = list(utterances)
    if isinstance(header, GeneratorSpec):
        header = DatasetHeader.from_spec(header)
    if header is None:
        header = infer_header(utterances)
    head = {"version": header.version, "T": header.T, "F": header.F, "C": header.C, "Nn": header.Nn}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(head) + "\n")
        for u in utterances:
            if u.frames.shape != (header.T, header.F):
                raise ValidationError(f"utterance {u.id} has shape {u.frames.shape}, header says {(header.T, header.F)}")
            # json emits repr(float), which round-trips float64 exactly
            record = {"id": u.id, "y": int(u.y), "n": int(u.n), "frames": u.frames.tolist()}
            fh.write(json.dumps(record, allow_nan=False) + "\n")


def _parse_header(line: str) -> DatasetHeader:
    try:
        head = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(1, f"header is not valid JSON: {exc.msg}") from None
    if not isinstance(head, dict):
        raise DatasetParseError(1, "header must be an object")
    for key in ("version", "T", "F", "C", "Nn"):
        if key not in head:
            raise DatasetParseError(1, f"header missing field {key!r}")
        if not isinstance(head[key], int):
            raise DatasetParseError(1, f"header field {key!r} must be an integer")
    if head["version"] != FORMAT_VERSION:
        raise DatasetParseError(1, f"unsupported version {head['version']}")
    return DatasetHeader(T=head["T"], F=head["F"], C=head["C"], Nn=head["Nn"], version=head["version"])


def _parse_record(line: str, lineno: int, header: DatasetHeader) -> Utterance:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(lineno, f"invalid JSON: {exc.msg}") from None
    if not isinstance(rec, dict):
        raise DatasetParseError(lineno, "record must be an object")
    for key in ("id", "y", "n", "frames"):
        if key not in rec:
            raise DatasetParseError(lineno, f"missing field {key!r}")
    if not isinstance(rec["id"], str):
        raise DatasetParseError(lineno, "id must be a string")
    for key, bound in (("y", header.C), ("n", header.Nn)):
        v = rec[key]
        if not isinstance(v, int) or isinstance(v, bool) or not 0 <= v < bound:
            raise DatasetParseError(lineno, f"{key} must be an integer in [0, {bound})")
    frames = rec["frames"]
    if not isinstance(frames, list) or len(frames) != header.T:
        raise DatasetParseError(lineno, f"frames must have {header.T} rows")
    for t, row in enumerate(frames):
        if not isinstance(row, list) or len(row) != header.F:
            raise DatasetParseError(lineno, f"frame row {t} must have {header.F} values (ragged matrix)")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in row):
            raise DatasetParseError(lineno, f"frame row {t} contains a non-numeric value")
    arr = np.array(frames, dtype=np.float64).reshape(header.T, header.F)
    if not np.all(np.isfinite(arr)):
        raise DatasetParseError(lineno, "frames contain non-finite values")
    return Utterance(id=rec["id"], y=rec["y"], n=rec["n"], frames=arr)


def load_dataset(path: str | Path) -> tuple[DatasetHeader, list[Utterance]]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first.strip():
            raise DatasetParseError(1, "missing header")
        header = _parse_header(first)
        out = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            out.append(_parse_record(line, lineno, header))
    return header, out


def read_dataset(path: str | Path) -> list[Utterance]:
    return load_dataset(path)[1]


def factor_mutual_information(ys: Sequence[int], ns: Sequence[int]) -> float:
    """Plug-in contingency-table estimate of I(y; n) in nats."""
    ys = np.asarray(ys)
    ns = np.asarray(ns)
    _, yi = np.unique(ys, return_inverse=True)
    _, ni = np.unique(ns, return_inverse=True)
    table = np.zeros((yi.max() + 1, ni.max() + 1))
    np.add.at(table, (yi, ni), 1.0)
    joint = table / table.sum()
    py = joint.sum(axis=1, keepdims=True)
    pn = joint.sum(axis=0, keepdims=True)
    mask = joint > 0
    return float(np.sum(joint[mask] * np.log(joint[mask] / (py @ pn)[mask])))


def label_counts(utterances: Sequence[Utterance]) -> dict[str, dict[int, int]]:
    counts: dict[str, dict[int, int]] = {"y": {}, "n": {}}
    for u in utterances:
        counts["y"][u.y] = counts["y"].get(u.y, 0) + 1
        counts["n"][u.n] = counts["n"].get(u.n, 0) + 1
    return {k: dict(sorted(v.items())) for k, v in counts.items()}
