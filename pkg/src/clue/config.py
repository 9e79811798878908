"""Run configuration: one YAML document, one dataclass per section.

Unknown keys are rejected with their dotted path. Every field has a
default, so an empty document is a valid (full-protocol toy) config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints

import yaml

from .denoiser import DenoiserConfig
from .errors import ConfigurationError
from .evalsuite import RecallConfig
from .harness import ClassifierConfig
from .sampler import DEFAULT_SIGMAS
from .trainer import TrainConfig


@dataclass
class DataConfig:
    n_per_class: int = 150
    raw_resolution: int = 40
    target: int = 32


@dataclass
class SampleConfig:
    sigmas: tuple[float, ...] = DEFAULT_SIGMAS
    n_runs: int = 3
    inference_steps: int = 50
    batch_size: int = 90
    # pool per class, as a percentage of the Dataset 1A class size; at least
    # the largest harness scale
    pool_percent: int = 1000


@dataclass
class EvalConfig:
    k: int = 10
    tau_policy: str = "median_real_to_real"
    pca_components: int = 2

    def recall(self) -> RecallConfig:
        return RecallConfig(self.k, self.tau_policy)


@dataclass
class HarnessConfig:
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    ratios: tuple[int, ...] = tuple(range(0, 101, 10))
    scales: tuple[int, ...] = (100, 200, 500, 1000)
    plus_real: bool = True
    n_runs: int = 3


@dataclass
class RunConfig:
    master_seed: int = 0
    deterministic: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)

    def validate(self) -> None:
        if self.sample.pool_percent < max(self.harness.scales, default=100):
            raise ConfigurationError("sample.pool_percent", "must cover the largest harness scale")
        if self.sample.pool_percent < 100:
            raise ConfigurationError("sample.pool_percent", "must be >= 100")
        if self.sample.n_runs < self.harness.n_runs:
            raise ConfigurationError("harness.n_runs", "cannot exceed sample.n_runs")
        if any(s < 0 for s in self.sample.sigmas):
            raise ConfigurationError("sample.sigmas", "must be >= 0")
        if any(not 0 <= r <= 100 for r in self.harness.ratios):
            raise ConfigurationError("harness.ratios", "must lie in [0, 100]")
        if self.model.resolution != self.data.target:
            raise ConfigurationError("model.resolution", "must equal data.target")
        if self.harness.classifier.resolution != self.data.target:
            raise ConfigurationError("harness.classifier.resolution", "must equal data.target")
        self.eval.recall()


def _build(cls, doc: Any, path: str):
    if not isinstance(doc, dict):
        raise ConfigurationError(path or "<root>", f"expected a mapping, got {type(doc).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigurationError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    kwargs = {}
    for name, value in doc.items():
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(hints[name], value, sub)
    try:
        return cls(**kwargs)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(path or "<root>", str(exc)) from exc


def _coerce(tp, value, path):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    origin = getattr(tp, "__origin__", None)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(path, "expected a list")
        inner = tp.__args__[0]
        return tuple(_coerce(inner, v, f"{path}[{i}]") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(path, "expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(path, "expected a string")
        return value
    return value


def parse(doc: dict | None) -> RunConfig:
    cfg = _build(RunConfig, doc or {}, "")
    cfg.validate()
    return cfg


def to_dict(cfg) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        return v

    return conv(cfg)


def load(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError("<file>", f"YAML parse error: {exc}") from exc
    return parse(doc)


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(to_dict(cfg), sort_keys=True).encode()).hexdigest()
