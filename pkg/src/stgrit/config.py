"""
Run configuration files.

A run config is a JSON object with up to three sections::

    {"model": {...}, "train": {...}, "data": {...}}

Unknown keys are rejected. ``p``, ``q`` and ``aggregation`` may be given in
either the model or the data section; if both name them they must agree.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError
from .geograph import HAVERSINE_MODES
from .model import AGGREGATIONS, ModelConfig
from .training import TrainConfig

SHARED_KEYS = ("p", "q", "aggregation")


@dataclass
class DataConfig:
    path: str | None = None
    p: int = 5
    q: int = 15
    min_layers: int = 20
    normalization: bool = True
    haversine_mode: str = "as-printed"
    aggregation: str = "uniform"

    def __post_init__(self):
        if self.haversine_mode not in HAVERSINE_MODES:
            raise ConfigError(f"haversine_mode must be one of {HAVERSINE_MODES}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
        if self.p < 1 or self.q < 1:
            raise ConfigError("p and q must be positive")
        if self.min_layers < self.p + self.q:
            raise ConfigError(f"min_layers={self.min_layers} is below p+q={self.p + self.q}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return {"model": asdict(self.model), "train": asdict(self.train),
                "data": asdict(self.data)}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _check_keys(section: str, raw, cls) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    return dict(raw)


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = sorted(set(doc) - {"model", "train", "data"})
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    model = _check_keys("model", doc.get("model", {}), ModelConfig)
    train = _check_keys("train", doc.get("train", {}), TrainConfig)
    data = _check_keys("data", doc.get("data", {}), DataConfig)
    for key in SHARED_KEYS:
        if key in model and key in data and model[key] != data[key]:
            raise ConfigError(f"model.{key}={model[key]!r} conflicts with data.{key}={data[key]!r}")
        if key in model:
            data[key] = model[key]
        elif key in data:
            model[key] = data[key]
    try:
        return RunConfig(ModelConfig(**model), TrainConfig(**train), DataConfig(**data))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_run_config(path=None) -> RunConfig:
    """Read and resolve a run config; ``None`` gives all defaults."""
    if path is None:
        return parse_run_config({})
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return parse_run_config(doc)
