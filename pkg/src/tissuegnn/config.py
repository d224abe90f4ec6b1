"""Run configuration: strict YAML loading with unknown-key rejection."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field

import yaml

from .datagen import GeneratorConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import LossConfig

__all__ = ["RunConfig", "TrainingSchedule", "load_config", "dump_config",
           "CONFIG_ENV_VAR"]

CONFIG_ENV_VAR = "TISSUEGNN_CONFIG"


@dataclass
class TrainingSchedule:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    split_seed: int = 0
    ratios: tuple = (7, 2, 1)

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("training schedule values must be positive")
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ConfigError("ratios must be three positive numbers")


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    training: TrainingSchedule = field(default_factory=TrainingSchedule)

    def validate(self):
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.generator.validate()
        self.model.validate()
        self.loss.validate()
        self.training.validate()

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "workers": self.workers,
            "generator": self.generator.to_dict(),
            "model": self.model.to_dict(),
            "loss": dict(self.loss.__dict__),
            "training": {**asdict(self.training),
                         "ratios": list(self.training.ratios)},
        }


def _build_section(cls, data: dict, name: str):
    known = set(cls.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return cls(**data)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Load a YAML run config; flag overrides win over file values.

    With no path, falls back to the TISSUEGNN_CONFIG environment variable,
    then to built-in defaults.
    """
    raw = {}
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR)
    if path:
        try:
            with open(path) as f:
                raw = yaml.safe_load(f) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config file is not valid YAML: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    for section, values in (overrides or {}).items():
        if isinstance(values, dict):
            raw.setdefault(section, {})
            raw[section].update(values)
        else:
            raw[section] = values
    known = {"seed", "workers", "generator", "model", "loss", "training"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    cfg = RunConfig(
        seed=int(raw.get("seed", 0)),
        workers=int(raw.get("workers", 1)),
        generator=GeneratorConfig.from_dict(raw.get("generator", {})),
        model=ModelConfig.from_dict(raw.get("model", {})),
        loss=_build_section(LossConfig, raw.get("loss", {}), "loss"),
        training=_build_section_training(raw.get("training", {})),
    )
    cfg.validate()
    return cfg


def _build_section_training(data: dict) -> TrainingSchedule:
    known = set(TrainingSchedule.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in 'training': {sorted(unknown)}")
    kwargs = dict(data)
    if "ratios" in kwargs:
        kwargs["ratios"] = tuple(kwargs["ratios"])
    return TrainingSchedule(**kwargs)


def dump_config(cfg: RunConfig, path) -> None:
    """Echo the fully resolved config (used by every run's output dir)."""
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)
