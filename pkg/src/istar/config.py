"""Flat ``key=value`` run configuration shared by every CLI command.

Keys are namespaced ``model.*``, ``train.*``, ``data.*``, ``eval.*`` and
``solver.*``.  A run starts from the library defaults, applies a config
file, then ``--set key=value`` overrides, and writes the resolved result
next to its outputs so the run can be replayed.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .ista import IstaSolverConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _defaults() -> dict:
    out = {}
    for prefix, cls in (("model", ModelConfig), ("train", TrainConfig), ("solver", IstaSolverConfig)):
        inst = cls()
        for f in fields(cls):
            out[f"{prefix}.{f.name}"] = getattr(inst, f.name)
    out.update({
        "data.root": "",          # empty: generate the synthetic mini-corpus
        "data.count": 20,
        "data.size": 96,
        "data.seed": 0,
        "data.use_cache": True,
        "eval.root": "",          # empty: synthetic held-out corpus
        "eval.count": 6,
        "eval.seed": 1,
        "eval.mode": "Y",
        "eval.workers": 1,
    })
    return out


DEFAULTS = _defaults()
# keys whose default is None still need a type for parsing
_TYPES = {"solver.alpha": float}


def _parse(key: str, raw: str):
    default = DEFAULTS[key]
    kind = _TYPES.get(key, type(default))
    raw = raw.strip()
    if key in _TYPES and raw.lower() in ("", "none"):
        return None
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def parse_lines(text: str, origin: str = "<config>") -> dict:
    out = {}
    for num, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{origin}:{num}: expected key=value, got {line!r}")
        if key not in DEFAULTS:
            raise ConfigError(f"{origin}:{num}: unknown key {key!r}")
        out[key] = _parse(key, val)
    return out


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown key {k!r}")
            self.values[k] = v

    @classmethod
    def build(cls, path=None, overrides=()) -> "RunConfig":
        vals = {}
        if path is not None:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            vals.update(parse_lines(text, str(path)))
        vals.update(parse_lines("\n".join(overrides), "--set"))
        return cls(vals)

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        self.values[key] = value

    def _section(self, prefix: str) -> dict:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self._section("model"))

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self._section("train"))

    def solver_config(self) -> IstaSolverConfig:
        return IstaSolverConfig(**self._section("solver"))

    def to_text(self) -> str:
        return "".join(f"{k}={'none' if v is None else v}\n" for k, v in sorted(self.values.items()))

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_text(), encoding="utf-8")
