"""Run configuration: a YAML document with backbone/data/stage1/stage2/eval sections.

Precedence, lowest first: built-in defaults, the config file, ``--set
section.key=value`` overrides, then dedicated command-line flags.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .stage1 import Stage1Config
from .stage2 import Stage2Config
from .training import config_from_dict, config_to_dict


class ConfigError(ValueError):
    pass


@dataclass
class BackboneSection:
    architecture_id: str = "tinyvgg"
    weights: str = "bundled"
    input_resolution: int = 32
    class_count: int = 10
    enhancement_tap: str | None = None
    # from-scratch training recipe
    train_epochs: int = 12
    train_batch: int = 64
    train_lr: float = 2e-3
    train_seed: int = 0


@dataclass
class DataSection:
    kind: str = "fog"
    severity: int = 3
    seed: int = 1
    n_train: int = 100


@dataclass
class EvalSection:
    kind: str | None = "fog"
    severity: int = 3
    seed: int = 9
    batch: int = 250


SECTIONS = {
    "backbone": BackboneSection,
    "data": DataSection,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    backbone: BackboneSection = field(default_factory=BackboneSection)
    data: DataSection = field(default_factory=DataSection)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return {name: config_to_dict(getattr(self, name)) for name in SECTIONS}

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = d or {}
        if not isinstance(d, dict):
            raise ConfigError("config document must be a mapping")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kw = {}
        for name, section_cls in SECTIONS.items():
            sub = d.get(name) or {}
            if not isinstance(sub, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            try:
                kw[name] = config_from_dict(section_cls, sub)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{name}: {e}") from None
        return cls(**kw)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_yaml(), encoding="utf-8")
        return path


def _parse_value(text: str) -> Any:
    return yaml.safe_load(text)


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings (value parsed as YAML) to a config dict."""
    d = {k: dict(v or {}) for k, v in d.items()}
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        path, value = item.split("=", 1)
        section, key = path.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if key not in {f.name for f in fields(SECTIONS[section])}:
            raise ConfigError(f"unknown key {section}.{key}")
        d.setdefault(section, {})[key] = _parse_value(value)
    return d


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    d = {}
    if path is not None:
        try:
            d = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("config document must be a mapping")
    if overrides:
        d = apply_overrides(d, overrides)
    return RunConfig.from_dict(d)
