"""Run configuration: one JSON document with four sections."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .enhance import EnhancementConfig
from .errors import ConfigError, PhaseFuseError
from .model import ModelConfig
from .training import TrainConfig

SEED_ENV = "PHASEFUSE_SEED"


@dataclass
class EvalConfig:
    batch_size: int = 64
    fold: int | None = None  # evaluate only rows of this fold when set

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("eval batch_size must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown eval keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


SECTIONS = {"enhancement": EnhancementConfig, "model": ModelConfig, "training": TrainConfig, "eval": EvalConfig}


@dataclass
class RunConfig:
    enhancement: EnhancementConfig = field(default_factory=EnhancementConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be an object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, kind in SECTIONS.items():
            body = d.get(name, {})
            if not isinstance(body, dict):
                raise ConfigError(f"section {name!r} must be an object")
            try:
                parts[name] = kind.from_dict(body)
            except PhaseFuseError:
                raise
            except (TypeError, ValueError) as e:
                raise ConfigError(f"section {name!r}: {e}") from e
        return cls(**parts)

    def to_dict(self) -> dict:
        return {name: getattr(self, name).to_dict() for name in SECTIONS}


def apply_seed_override(cfg: RunConfig, environ=None) -> RunConfig:
    """Replace the training seed with ``PHASEFUSE_SEED`` when it is set."""
    env = os.environ if environ is None else environ
    raw = env.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        seed = int(raw, 0)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from None
    if not 0 <= seed < 2 ** 64:
        raise ConfigError(f"{SEED_ENV} must fit in 64 unsigned bits")
    cfg.training.seed = seed
    return cfg


def load_config(path=None, environ=None) -> RunConfig:
    """Defaults, overlaid by the JSON file at ``path``, then the seed env var."""
    if path is None:
        cfg = RunConfig()
    else:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from None
        cfg = RunConfig.from_dict(doc)
    return apply_seed_override(cfg, environ)


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
