"""Nested JSON run configuration with strict key checking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from dualsync.data import SynthConfig
from dualsync.errors import ConfigError
from dualsync.model import ModelConfig
from dualsync.training import ConsistencyConfig, LossWeights, TrainConfig

RESOLVED_NAME = "resolved_config.json"


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass(frozen=True)
class SamplerConfig:
    strategy: str = "lcm_async"
    steps_exp: int | None = None
    steps_ges: int | None = None
    overlap: int = 8
    concurrent: bool = False


@dataclass(frozen=True)
class MetricConfig:
    ba_sigma: float = 0.1
    encoder_seed: int = 0xA5F
    div_batch: int = 50

    def __post_init__(self):
        if self.ba_sigma <= 0:
            raise ConfigError("ba_sigma must be positive")
        if self.div_batch < 2:
            raise ConfigError("div_batch must be at least 2")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    consistency: ConsistencyConfig = field(default_factory=ConsistencyConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: SynthConfig = field(default_factory=SynthConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    seed: int = 0
    holdout: float = 0.2


def _build(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        where = f" in {path}" if path else ""
        raise ConfigError(f"unknown config key(s){where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        default = getattr(cls(), name) if name in known else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in {path or 'config'}: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw, "")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    return config_from_dict(raw)


def override(cfg: RunConfig, section: str | None, **values) -> RunConfig:
    """Apply flag overrides; ``None`` values leave the file setting in place."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    if section is None:
        return replace(cfg, **values)
    return replace(cfg, **{section: replace(getattr(cfg, section), **values)})


def config_to_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


def write_resolved(cfg: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / RESOLVED_NAME
    path.write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True))
    return path
