"""Training configuration, per-dataset presets and the flat ``key = value`` config file."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

from .params import Ablation, Dims


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class TrainConfig:
    d: int = 128
    m: int = 10
    layers: int = 3
    heads: int = 1
    k: int = 50
    learning_rate: float = 1e-3
    max_epochs: int = 60
    seed: int = 0
    multi_span: bool = True
    disentangle: bool = True
    virtual_graph: bool = True
    channels: int = 32
    kernel_width: int = 3
    patience: int = 0
    dataset: str = ""
    checkpoint: str = ""
    preset: str = ""

    def validate(self) -> "TrainConfig":
        for name in ("d", "m", "layers", "heads", "k", "channels", "kernel_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_epochs < 0 or self.patience < 0:
            raise ConfigError("max_epochs and patience must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.kernel_width % 2 == 0:
            raise ConfigError("kernel_width must be odd")
        return self

    @property
    def ablation(self) -> Ablation:
        return Ablation(self.multi_span, self.disentangle, self.virtual_graph)

    def dims(self, num_entities: int, num_raw_relations: int) -> Dims:
        return Dims(num_entities, num_raw_relations, self.d, self.layers, self.heads, self.channels, self.kernel_width)

    def to_items(self) -> dict[str, str]:
        """Canonical text form, sorted by key."""
        return {f.name: format_value(getattr(self, f.name)) for f in sorted(dataclasses.fields(self), key=lambda f: f.name)}

    def model_items(self) -> dict[str, str]:
        """Entries that fix parameter shapes."""
        keys = ("d", "layers", "heads", "channels", "kernel_width")
        return {k: format_value(getattr(self, k)) for k in keys}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(name: str, raw: str):
    ftype = {f.name: f.type for f in dataclasses.fields(TrainConfig)}[name]
    raw = raw.strip()
    try:
        if ftype in ("bool", bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


# Implementation-details defaults; "synth" is the desk-scale acceptance setting.
PRESETS: dict[str, dict] = {
    "icews14": dict(d=128, learning_rate=1e-3, k=50, max_epochs=60, m=10, layers=3, heads=4),
    "icews05-15": dict(d=128, learning_rate=1e-3, k=50, max_epochs=60, m=2, layers=1, heads=1),
    "icews18": dict(d=128, learning_rate=1e-3, k=50, max_epochs=60, m=10, layers=3, heads=4),
    "gdelt": dict(d=128, learning_rate=1e-3, k=50, max_epochs=60, m=5, layers=3, heads=1),
    "synth": dict(d=32, learning_rate=1e-3, k=10, max_epochs=60, m=4, layers=2, heads=1),
}

ALIASES = {"layers": ("omega", "w"), "heads": ("nh",), "learning_rate": ("lr",), "max_epochs": ("epochs",)}


def canonical_key(key: str) -> str:
    key = key.strip().replace("-", "_")
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    if key in names:
        return key
    for name, alts in ALIASES.items():
        if key in alts:
            return name
    raise ConfigError(f"unknown config key {key!r}")


def read_config_file(path: str | os.PathLike) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = line.split("=", 1)
            name = canonical_key(key)
            values[name] = _coerce(name, raw)
    return values


def resolve_config(
    preset: str | None = None, file_values: dict | None = None, overrides: dict | None = None
) -> TrainConfig:
    """Built-in default < preset < config file < command-line flags."""
    values: dict = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        values.update(PRESETS[preset])
        values["preset"] = preset
    values.update(file_values or {})
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig(**values).validate()


def config_from_items(items: dict[str, str]) -> TrainConfig:
    return TrainConfig(**{canonical_key(k): _coerce(canonical_key(k), v) for k, v in items.items()})
