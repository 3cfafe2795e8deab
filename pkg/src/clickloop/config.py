"""Run configuration: one TOML file mapped onto the frozen config dataclasses.

Keys are grouped by section (model.*, train.*, synth.*, eval.*, errors.*,
weights.*, service.*), written either as dotted keys or TOML tables. Every
key must name a real dataclass field; unknown keys fail loudly with the
offending dotted name instead of being ignored.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ErrorConfig
from .evaluation import EvalConfig
from .matching import CostWeights
from .model import ModelConfig
from .synth import SynthConfig
from .train import TrainConfig

__all__ = ["UnknownConfigKeyError", "ServiceConfig", "RunConfig", "load_run_config"]


class UnknownConfigKeyError(ValueError):
    """A config key does not correspond to any known option."""


@dataclass(frozen=True)
class ServiceConfig:
    port: int = 8731
    canvas: tuple[int, int] = (256, 256)
    score_threshold: float = 0.5

    def __post_init__(self) -> None:
        if not (0 < self.port < 65536):
            raise ValueError(f"port {self.port} outside (0, 65536)")
        if not (0.0 <= self.score_threshold <= 1.0):
            raise ValueError("score_threshold must be in [0, 1]")
        w, h = self.canvas
        if w < 16 or h < 16:
            raise ValueError("canvas dims must be >= 16")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    synth: SynthConfig = SynthConfig()
    eval: EvalConfig = EvalConfig()
    service: ServiceConfig = ServiceConfig()

    def describe(self) -> str:
        """Resolved key = value lines, one per option, for startup logging."""
        lines = []
        for section in dataclasses.fields(self):
            value = getattr(self, section.name)
            for f in dataclasses.fields(value):
                v = getattr(value, f.name)
                if dataclasses.is_dataclass(v):
                    for sub in dataclasses.fields(v):
                        lines.append(f"{section.name}.{f.name}.{sub.name} = {getattr(v, sub.name)!r}")
                else:
                    lines.append(f"{section.name}.{f.name} = {v!r}")
        return "\n".join(lines)


def _coerce(value: Any, template: Any) -> Any:
    """Shape TOML values to the field's expectations: arrays become tuples,
    ints feed float fields, nested numbers inside stay floats."""
    if isinstance(value, list):
        return tuple(_coerce(v, None) for v in value)
    if isinstance(template, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, dict):
        return {k: _coerce(v, None) for k, v in value.items()}
    return value


def _build(cls, data: dict, section: str, nested: Optional[dict] = None):
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = dict(nested or {})
    for key, value in data.items():
        if key not in known or key in kwargs:
            raise UnknownConfigKeyError(f"unknown config key {section}.{key}")
        kwargs[key] = _coerce(value, getattr(defaults, key))
    return cls(**kwargs)


def load_run_config(path: Optional[str | Path] = None) -> RunConfig:
    """Parse a TOML run config; None or a missing section means defaults."""
    raw: dict[str, Any] = {}
    if path is not None:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    sections = {
        "model": ModelConfig,
        "train": TrainConfig,
        "synth": SynthConfig,
        "eval": EvalConfig,
        "errors": ErrorConfig,
        "weights": CostWeights,
        "service": ServiceConfig,
    }
    for key in raw:
        if key not in sections:
            raise UnknownConfigKeyError(f"unknown config section {key!r}")
        if not isinstance(raw[key], dict):
            raise UnknownConfigKeyError(
                f"top-level key {key!r} must be a section (write {key}.option = value)"
            )
    errors = _build(ErrorConfig, raw.get("errors", {}), "errors")
    weights = _build(CostWeights, raw.get("weights", {}), "weights")
    train_section = dict(raw.get("train", {}))
    for reserved in ("errors", "weights"):
        if reserved in train_section:
            raise UnknownConfigKeyError(
                f"set [{reserved}] options in their own section, not train.{reserved}"
            )
    return RunConfig(
        model=_build(ModelConfig, raw.get("model", {}), "model"),
        train=_build(
            TrainConfig,
            train_section,
            "train",
            nested={"errors": errors, "weights": weights},
        ),
        synth=_build(SynthConfig, raw.get("synth", {}), "synth"),
        eval=_build(EvalConfig, raw.get("eval", {}), "eval"),
        service=_build(ServiceConfig, raw.get("service", {}), "service"),
    )
