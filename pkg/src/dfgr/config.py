"""``section.key=value`` run configuration with schema validation.

A config file holds one assignment per line; ``#`` starts a comment.
Command-line ``--section.key=value`` overrides are applied after the file.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

from .datagen import GeneratorSpec
from .flops import CostModel
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train_fraction: float = 0.8
    path: str = ""
    sidecar: str = ""


@dataclass
class OracleConfig:
    configs: int = 200
    seed: int = 0
    max_n: int = 64
    dims: str = "8,16"
    heads: str = "1,2"
    layers: str = "1,2,4"
    residual: str = "both"
    tolerance: float = 1e-10
    fault: str = ""


@dataclass
class BenchConfig:
    grid: str = "256,512,1024,2048,4096,8192,16384"
    K: int = 32
    D: int = 64
    H: int = 2
    L: int = 1
    B: int = 1
    m: int = 1
    trials: int = 5
    max_runtime_n: int = 1024


SECTIONS: dict[str, type] = {
    "train": TrainConfig,
    "gen": GeneratorSpec,
    "cost": CostModel,
    "data": DataConfig,
    "oracle": OracleConfig,
    "bench": BenchConfig,
}


def _coerce(raw: str, typ, key: str):
    origin = typing.get_origin(typ)
    if origin is typing.Union:
        typ = next(a for a in typing.get_args(typ) if a is not type(None))
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if typ is float:
            return float(raw)
        return str(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def _field_types(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)

    def set(self, key: str, raw: str) -> None:
        section, dot, name = key.partition(".")
        if not dot or section not in SECTIONS:
            raise ConfigError(
                f"unknown key {key!r}; keys look like <section>.<name> with section in "
                + ", ".join(SECTIONS)
            )
        types = _field_types(SECTIONS[section])
        if name not in types:
            raise ConfigError(
                f"unknown key {key!r}; valid keys in [{section}]: " + ", ".join(types)
            )
        self.values.setdefault(section, {})[name] = _coerce(raw, types[name], key)

    def build(self, section: str):
        cls = SECTIONS[section]
        try:
            return cls(**self.values.get(section, {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {exc}") from None

    def resolved(self) -> dict[str, dict]:
        return {s: dataclasses.asdict(self.build(s)) for s in SECTIONS}


def parse_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"line {lineno}: expected key=value")
        cfg.set(key.strip(), value.strip())
    return cfg


def load(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        with open(path, encoding="utf-8") as fh:
            parse_text(fh.read(), cfg)
    for item in overrides or []:
        key, eq, value = item.lstrip("-").partition("=")
        if not eq:
            raise ConfigError(f"override {item!r} must look like --section.key=value")
        cfg.set(key, value)
    return cfg
