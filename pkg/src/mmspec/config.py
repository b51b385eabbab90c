"""Experiment configuration: dataclass defaults plus a flat ``section.key = value`` file format.

Every field has a default. A config file overrides any subset of dotted
keys; unknown keys and malformed values are errors. ``to_text`` renders the
fully resolved configuration in the same format, which is what gets echoed
into the output directory and hashed for report provenance.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

from .distill import DEFAULT_GRID, TaskDims

ARMS = ("baseline_text_only", "massv_no_sdvit", "massv_full")
ABLATIONS = ("sdvit", "text_only")

# keys that only affect where and how fast things run, never the numbers
_NON_SEMANTIC = ("out", "workers")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_text: int = 10_000
    n_pretrain: int = 5_000
    n_distill: int = 10_000
    n_eval: int = 200
    n_probe: int = 50
    grid: tuple = DEFAULT_GRID
    ctx_dependent: bool = True


@dataclass(frozen=True)
class PhaseConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-2


@dataclass(frozen=True)
class TrainSection:
    text: PhaseConfig = PhaseConfig(epochs=10, lr=0.1)
    phase1: PhaseConfig = PhaseConfig(epochs=5, lr=0.05)
    phase2: PhaseConfig = PhaseConfig(epochs=10, lr=0.05)


@dataclass(frozen=True)
class EvalConfig:
    gamma: int = 5
    temperatures: tuple = (0.0, 1.0)
    max_tokens: int = 24
    cost_ratio: float = 0.1


@dataclass(frozen=True)
class VerifyConfig:
    vocab: int = 4
    max_len: int = 4
    trials: int = 100_000
    gamma: int = 3
    identity_pairs: int = 1_000
    temperatures: tuple = (1.0, 0.7)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    workers: int = 1
    arms: tuple = ARMS
    task: TaskDims = TaskDims()
    data: DataConfig = DataConfig()
    train: TrainSection = TrainSection()
    eval: EvalConfig = EvalConfig()
    verify: VerifyConfig = VerifyConfig()

    def validate(self) -> "ExperimentConfig":
        if not self.arms:
            raise ConfigError("arm list is empty")
        unknown = [a for a in self.arms if a not in ARMS]
        if unknown:
            raise ConfigError(f"unknown arm(s) {unknown}; choose from {list(ARMS)}")
        if len(set(self.arms)) != len(self.arms):
            raise ConfigError("duplicate arm names")
        if not self.eval.temperatures:
            raise ConfigError("eval.temperatures is empty")
        if any(t < 0 for t in self.eval.temperatures):
            raise ConfigError("temperatures must be non-negative")
        if self.eval.gamma < 1:
            raise ConfigError("eval.gamma must be >= 1")
        if self.eval.cost_ratio < 0:
            raise ConfigError("eval.cost_ratio must be non-negative")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for name in ("n_text", "n_pretrain", "n_distill", "n_eval"):
            if getattr(self.data, name) < 1:
                raise ConfigError(f"data.{name} must be positive")
        if not self.data.grid:
            raise ConfigError("data.grid is empty")
        if self.verify.vocab ** self.verify.max_len > 10**6:
            raise ConfigError("verify.vocab ** verify.max_len exceeds the enumeration budget")
        return self

    # ------------------------------------------------------------------ io

    def to_text(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in flatten(self))

    def config_hash(self) -> str:
        text = "".join(f"{k} = {_render(v)}\n" for k, v in flatten(self) if k not in _NON_SEMANTIC)
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def override(self, **pairs: Any) -> "ExperimentConfig":
        """Set dotted keys from already-typed values or strings."""
        cfg = self
        for key, value in pairs.items():
            cfg = _set(cfg, key.split("."), value, key)
        return cfg


def flatten(obj, prefix: str = "") -> Iterator[tuple[str, Any]]:
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            yield from flatten(v, key + ".")
        else:
            yield key, v


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(":".join(_render(x) for x in item) if isinstance(item, tuple) else _render(item)
                         for item in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(text: str, like, key: str):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None
    return text


def _parse(value, default, key: str):
    if not isinstance(value, str):
        if isinstance(default, tuple):
            return tuple(value)
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        return value
    if isinstance(default, tuple):
        items = [s for s in (x.strip() for x in value.split(",")) if s]
        if default and isinstance(default[0], tuple):
            out = []
            for item in items:
                parts = item.split(":")
                if len(parts) != len(default[0]):
                    raise ConfigError(f"{key}: expected {len(default[0])} ':'-separated values in {item!r}")
                out.append(tuple(_parse_scalar(p, d, key) for p, d in zip(parts, default[0])))
            return tuple(out)
        like = default[0] if default else ""
        return tuple(_parse_scalar(x, like, key) for x in items)
    return _parse_scalar(value, default, key)


def _set(obj, path: list[str], value, key: str):
    names = {f.name for f in dataclasses.fields(obj)}
    head = path[0]
    if head not in names:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(obj, head)
    if dataclasses.is_dataclass(current):
        if len(path) == 1:
            raise ConfigError(f"{key!r} is a section, not a key")
        new = _set(current, path[1:], value, key)
    else:
        if len(path) != 1:
            raise ConfigError(f"unknown config key {key!r}")
        new = _parse(value, current, key)
    return dataclasses.replace(obj, **{head: new})


def parse_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg = _set(cfg, key.split("."), value, key)
    return cfg


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        cfg = parse_text(Path(path).read_text(encoding="utf-8"), cfg)
    return cfg.override(**overrides).validate()
