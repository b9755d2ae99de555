"""Resolved run configuration: built-in defaults, then a JSON file, then flags."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .frustum import FrustumConfig
from .metrics import MatchConfig
from .model import ModelConfig
from .synth import SynthSpec
from .train import TrainConfig

MODEL_PRESETS = {"full": ModelConfig, "desk": ModelConfig.desk, "tiny": ModelConfig.tiny}


def _dataclass_from(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    split_ratios: tuple = (0.70, 0.15, 0.15)
    model_preset: str = "desk"
    synth: dict = field(default_factory=dict)
    frustum: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    match: dict = field(default_factory=dict)

    def __post_init__(self):
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        if self.model_preset not in MODEL_PRESETS:
            raise ValueError(f"model_preset must be one of {sorted(MODEL_PRESETS)}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        # build everything once so a bad section fails before any work starts
        self.synth_spec(), self.frustum_config(), self.model_config(), self.train_config(), self.match_config()

    def synth_spec(self) -> SynthSpec:
        d = dict(self.synth)
        if "lidar_offset" in d:
            d["lidar_offset"] = tuple(d["lidar_offset"])
        return _dataclass_from(SynthSpec, d)

    def frustum_config(self) -> FrustumConfig:
        d = {"n_points": self.model_config().n_points, "crop_size": self.model_config().crop_size}
        d.update(self.frustum)
        return _dataclass_from(FrustumConfig, d)

    def model_config(self) -> ModelConfig:
        base = MODEL_PRESETS[self.model_preset]().to_dict()
        base["num_classes"] = len(self.synth_spec().classes)
        base.update(self.model)
        return _dataclass_from(ModelConfig, base)

    def train_config(self) -> TrainConfig:
        d = {"seed": self.seed}
        d.update(self.train)
        return _dataclass_from(TrainConfig, d)

    def match_config(self) -> MatchConfig:
        return _dataclass_from(MatchConfig, dict(self.match))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _dataclass_from(cls, d)


def deep_merge(base: dict, over: dict) -> dict:
    """Recursive dict update; ``over`` wins, nested dicts merge key by key."""
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve(config_path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Defaults < config file < ``overrides`` (already-parsed flag values; None means unset)."""
    merged = RunConfig().to_dict()
    if config_path is not None:
        merged = deep_merge(merged, json.loads(Path(config_path).read_text()))
    flat = {k: v for k, v in (overrides or {}).items() if v is not None}
    nested: dict = {}
    for key, value in flat.items():
        node = nested
        *head, last = key.split(".")
        for h in head:
            node = node.setdefault(h, {})
        node[last] = value
    return RunConfig.from_dict(deep_merge(merged, nested))
