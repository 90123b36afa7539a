"""Run configuration: one YAML file, fixed sections, unknown keys rejected.

Example::

    seed: 0
    data: {count: 3000, num_classes: 8}
    train: {epochs: 40, beta: 0.01}
    paths: {dataset: data/synth.jsonl, out_dir: runs/flower}

Every key has a default, so an empty file is a valid config.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .errors import ValidationError
from .synthdata import GeneratorSpec
from .trainer import ModelConfig, TrainConfig


@dataclass(frozen=True)
class DataSection:
    count: int = 3000
    num_classes: int = 8
    num_nuisance: int = 4
    frames: int = 20
    feat_dim: int = 16
    class_scale: float = 2.0
    nuisance_scale: float = 2.0
    noise_std: float = 0.5


@dataclass(frozen=True)
class EvalSection:
    # contiguous index split of the dataset file: train | valid | test
    valid_fraction: float = 0.1
    test_fraction: float = 0.25
    pairs_per_class: int = 200
    probe_heldout: float = 0.3
    valid_every: int = 1
    split: str = "test"


@dataclass(frozen=True)
class PathsSection:
    dataset: str = "data/synth.jsonl"
    out_dir: str = "runs/flower"


@dataclass(frozen=True)
class MICheckSection:
    rhos: tuple[float, ...] = (0.0, 0.5, 0.9)
    batch: int = 100_000
    mode: str = "all_pairs"
    dims: int = 1


@dataclass(frozen=True)
class GradCheckSection:
    instances: int = 5
    eps: float = 1e-5
    tol: float = 1e-3
    max_coords: int | None = None
    corrupt: bool = False


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)
    mi_check: MICheckSection = field(default_factory=MICheckSection)
    grad_check: GradCheckSection = field(default_factory=GradCheckSection)

    def generator_spec(self) -> GeneratorSpec:
        d = asdict(self.data)
        d.pop("count")
        return GeneratorSpec(seed=derived_seed(self.seed, "data"), **d)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)

    def validate(self) -> "RunConfig":
        _wrap("data", lambda: self.generator_spec().validate())
        if self.data.count < 1:
            raise ValidationError("data.count must be >= 1")
        _wrap("model", self.model.validate)
        _wrap("train", self.train_config().validate)
        e = self.eval
        if not (0 <= e.valid_fraction < 1 and 0 < e.test_fraction < 1 and e.valid_fraction + e.test_fraction < 1):
            raise ValidationError("eval.valid_fraction and eval.test_fraction must leave a non-empty training split")
        if e.pairs_per_class < 1:
            raise ValidationError("eval.pairs_per_class must be >= 1")
        if not 0 < e.probe_heldout < 1:
            raise ValidationError("eval.probe_heldout must lie in (0, 1)")
        if e.valid_every < 1:
            raise ValidationError("eval.valid_every must be >= 1")
        if e.split not in ("train", "valid", "test", "all"):
            raise ValidationError("eval.split must be one of train, valid, test, all")
        m = self.mi_check
        if m.batch < 2 or m.dims < 1 or m.mode not in ("all_pairs", "derangement", "auto"):
            raise ValidationError("mi_check needs batch >= 2, dims >= 1 and a known mode")
        if any(isinstance(r, bool) or not isinstance(r, (int, float)) or not -1 < r < 1 for r in m.rhos):
            raise ValidationError("mi_check.rhos must lie in (-1, 1)")
        g = self.grad_check
        if g.instances < 1 or g.eps <= 0 or g.tol <= 0:
            raise ValidationError("grad_check needs instances >= 1, eps > 0 and tol > 0")
        return self


_SECTIONS = {
    "data": DataSection,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalSection,
    "paths": PathsSection,
    "mi_check": MICheckSection,
    "grad_check": GradCheckSection,
}


def _wrap(section: str, fn) -> None:
    try:
        fn()
    except ValidationError as exc:
        raise ValidationError(f"{section}: {exc}") from None


def derived_seed(seed: int, name: str) -> int:
    """Named 63-bit sub-seed of the run seed."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


def _coerce(cls, section: str, raw: Any):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValidationError(f"section '{section}' must be a mapping")
    known = {f.name: f for f in fields(cls)}
    if section == "train":
        # the run seed lives at top level
        known.pop("seed")
    for key in raw:
        if key not in known:
            raise ValidationError(f"unknown key '{section}.{key}'")
    kwargs = {}
    for key, value in raw.items():
        default = getattr(cls(), key)
        if isinstance(default, tuple):
            if not isinstance(value, list):
                raise ValidationError(f"'{section}.{key}' must be a list")
            value = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ValidationError(f"'{section}.{key}' must be true or false")
        elif isinstance(default, int) or default is None:
            # the only None defaults are optional counts
            if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
                raise ValidationError(f"'{section}.{key}' must be an integer")
        elif isinstance(default, float):
            value = _number(value, f"{section}.{key}")
        elif isinstance(default, str) and not isinstance(value, str):
            raise ValidationError(f"'{section}.{key}' must be a string")
        kwargs[key] = value
    return cls(**kwargs)


def _number(value: Any, key: str) -> float:
    # YAML 1.1 reads "1e-3" as a string
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            pass
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"'{key}' must be a number")
    return float(value)


def config_from_mapping(data: dict | None) -> RunConfig:
    data = data or {}
    if not isinstance(data, dict):
        raise ValidationError("config root must be a mapping")
    for key in data:
        if key != "seed" and key not in _SECTIONS:
            raise ValidationError(f"unknown key '{key}'")
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ValidationError("'seed' must be an integer")
    sections = {name: _coerce(cls, name, data.get(name)) for name, cls in _SECTIONS.items()}
    return RunConfig(seed=seed, **sections).validate()


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate; YAML errors become ``ValidationError``, unreadable files ``OSError``."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValidationError(f"config is not valid YAML: {exc}") from None
    return config_from_mapping(data)


def config_to_mapping(cfg: RunConfig) -> dict:
    out: dict[str, Any] = {"seed": cfg.seed}
    for name in _SECTIONS:
        d = asdict(getattr(cfg, name))
        if name == "train":
            d.pop("seed")
        out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
    return out
