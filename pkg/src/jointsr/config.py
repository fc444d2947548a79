"""Run configuration: flat ``section.key = value`` files with a strict schema.

Files are TOML restricted to dotted keys (``[section]`` tables work too).
Unknown keys and wrongly typed values are rejected.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import tomli

from .imaging import PathLike
from .losses import LossWeights
from .models import ModelConfig
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "JOINTSR_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    corpus: str = ""  # empty: synthetic corpus
    hr_size: int = 64
    n_samples: int = 500
    n_test: int = 100
    seed: int = 1
    foreign: str = ""  # cross-dataset corpus dir; empty: synthetic with foreign_seed
    foreign_seed: int = 2


@dataclass
class EvalConfig:
    area_fraction: float = 0.25
    seed: int = 0
    sizes: list = field(default_factory=lambda: [0, 2, 4, 6, 8])
    csv: bool = False


@dataclass
class OutputConfig:
    dir: str = "runs/default"


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "eval": EvalConfig,
    "output": OutputConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def flat(self) -> dict[str, Any]:
        out = {}
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                out[f"{section}.{f.name}"] = getattr(obj, f.name)
        return out

    def describe(self) -> str:
        return "\n".join(f"{k} = {_fmt(v)}" for k, v in self.flat().items())

    def output_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        d = Path(self.output.dir)
        if root:
            return Path(root) / (d.name if d.is_absolute() else d)
        return d


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    return str(v)


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported value {value!r}")


def from_mapping(values: dict[str, Any], base: Optional[RunConfig] = None) -> RunConfig:
    """Apply flat ``section.key`` overrides onto ``base`` (defaults if omitted)."""
    cfg = base or RunConfig()
    defaults = cfg.flat()
    unknown = sorted(set(values) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    updates: dict[str, dict[str, Any]] = {}
    for key, value in values.items():
        section, name = key.split(".", 1)
        updates.setdefault(section, {})[name] = _coerce(key, value, defaults[key])
    kwargs = {}
    for section, upd in updates.items():
        try:
            kwargs[section] = replace(getattr(cfg, section), **upd)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {exc}") from exc
    return replace(cfg, **kwargs)


def load_config(path: Optional[PathLike]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        raw = tomli.loads(p.read_text())
    except OSError as exc:
        raise ConfigError(f"{p}: cannot read config ({exc.strerror})") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    flat = _flatten(raw)
    bad = [k for k in flat if k.count(".") != 1]
    if bad:
        raise ConfigError(f"{p}: keys must have the form section.key: {', '.join(bad)}")
    return from_mapping(flat)
