"""Run configuration: one JSON document with ``data``, ``losses``,
``schedule``, ``eval`` and ``paths`` sections. Every field has a default;
unknown sections or keys are errors."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import SyntheticSpec
from .losses import LossConfig
from .metrics import TopKSelector
from .trainer import TrainSchedule


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    keep_fraction: float = 0.2
    fill_policy: str = "zero"
    sigma: float = 5.0
    mask_source: str = "learned_masker"
    split: str = "test"
    mask_threshold: float = 0.5

    def __post_init__(self):
        TopKSelector(self.keep_fraction, self.fill_policy)  # validates both fields
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.mask_source not in ("learned_masker", "gt_mask", "degraded_mask", "ones"):
            raise ValueError(f"unknown mask_source {self.mask_source!r}")
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"split must be train, val or test, got {self.split!r}")

    def selector(self) -> TopKSelector:
        return TopKSelector(self.keep_fraction, self.fill_policy)


@dataclass
class PathsConfig:
    """Sub-directories of the command's ``--out`` directory."""

    checkpoints: str = "checkpoints"
    reports: str = "reports"
    heatmaps: str = "heatmaps"


_SECTIONS = {"data": SyntheticSpec, "losses": LossConfig, "schedule": TrainSchedule,
             "eval": EvalConfig, "paths": PathsConfig}


@dataclass
class RunConfig:
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    losses: LossConfig = field(default_factory=LossConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        built = {}
        for name, kind in _SECTIONS.items():
            section = doc.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in fields(kind)}
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            try:
                built[name] = kind(**section)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name!r} section: {exc}") from exc
        return cls(**built)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_seed(self, seed: int) -> "RunConfig":
        doc = self.to_dict()
        doc["data"]["seed"] = seed
        doc["schedule"]["seed"] = seed
        return RunConfig.from_dict(doc)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return RunConfig.from_dict(doc)
