"""Run configuration: a YAML file plus ``key=value`` overrides.

Every section maps onto a frozen dataclass. Unknown keys are rejected by
their dotted path so a typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .dsp import StftConfig
from .model import ModelConfig
from .training import OptimizerConfig, TrainConfig


class ConfigError(ValueError):
    """A configuration problem; ``key`` is the dotted path at fault."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class DataConfig:
    path: str | None = None
    split: str = "train"
    segment_length: int = 50
    threshold_db: float = 30.0


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {
    "data": DataConfig,
    "stft": StftConfig,
    "model": ModelConfig,
    "optimizer": OptimizerConfig,
    "train": TrainConfig,
}


def _coerce(key: str, value: Any, default: Any) -> Any:
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def _build_section(name: str, cls, values: dict) -> Any:
    if not isinstance(values, dict):
        raise ConfigError(name, "expected a mapping")
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
        kwargs[key] = _coerce(f"{name}.{key}", value, getattr(defaults, key))
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(name, str(exc)) from exc


def parse_override(item: str) -> tuple[str, Any]:
    """``section.key=value`` with the value parsed as YAML (so ``1e-3`` is a float)."""
    key, sep, raw = item.partition("=")
    if not sep or "." not in key:
        raise ConfigError(key or item, "override must look like section.key=value")
    value = yaml.safe_load(raw) if raw else None
    if isinstance(value, str):
        try:
            value = float(value)  # yaml 1.1 leaves '1e-3' as a string
        except ValueError:
            pass
    return key, value


def build_config(raw: dict | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    raw = dict(raw or {})
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(key, "unknown section")
    merged = {name: dict(raw.get(name) or {}) for name in SECTIONS}
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in SECTIONS:
            raise ConfigError(dotted, "unknown section")
        merged[section][key] = value
    stft = _build_section("stft", StftConfig, merged["stft"])
    if "F" not in merged["model"]:
        merged["model"]["F"] = stft.n_freq
    cfg = RunConfig(**{name: _build_section(name, cls, merged[name]) if name != "stft" else stft
                       for name, cls in SECTIONS.items()})
    if cfg.model.F != stft.n_freq:
        raise ConfigError("model.F", f"{cfg.model.F} does not match stft.window_length // 2 + 1 = {stft.n_freq}")
    if cfg.data.segment_length < 1:
        raise ConfigError("data.segment_length", "must be >= 1")
    return cfg


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError("config", f"{path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config", f"{path} must contain a mapping")
    return build_config(raw, overrides)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
