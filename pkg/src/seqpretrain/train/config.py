"""Stage configuration and its ``key=value`` file format.

Every field is addressable; nested configs use dotted keys::

    stage=acoustic
    max_steps=500
    mask.K=2
    model.d_model=32

Blank lines and lines starting with ``#`` are ignored.
"""

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable

from ..mask import MaskConfig
from ..nnet.model import ModelConfig

STAGES = ("acoustic", "linguistic", "posttrain")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "acoustic"
    batch_size: int = 32
    max_frames: int = 0  # >0: cap on B * T_max per batch, overrides batch_size
    max_steps: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    warmup_steps: int = 400
    lr_scale: float = 1.0
    label_smoothing: float = 0.1
    mask: MaskConfig = field(default_factory=MaskConfig)
    avg_last_n: int = 20
    ckpt_every: int = 10
    log_every: int = 10
    eval_every: int = 0
    freeze_encoder: bool = False
    seed: int = 0
    dtype: str = "float64"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        for name in ("batch_size", "max_steps", "warmup_steps", "avg_last_n", "ckpt_every", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")


def _coerce(value: str, typ, key: str):
    try:
        if typ is bool or typ == "bool":
            low = value.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(value)
            return low in ("1", "true", "yes")
        if typ is int or typ == "int":
            return int(value)
        if typ is float or typ == "float":
            return float(value)
        return value.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def _apply(obj, items: Dict[str, str], prefix: str = ""):
    updates = {}
    nested = {}
    known = {f.name: f for f in fields(obj)}
    for key, value in items.items():
        head, dot, rest = key.partition(".")
        if head not in known:
            raise ConfigError(f"unknown config key {prefix}{key!r}")
        if dot:
            nested.setdefault(head, {})[rest] = value
        else:
            if dataclasses.is_dataclass(getattr(obj, head)):
                raise ConfigError(f"{prefix}{head} is a section; use {prefix}{head}.<field>")
            updates[head] = _coerce(value, known[head].type, prefix + key)
    for head, sub in nested.items():
        updates[head] = _apply(getattr(obj, head), sub, prefix + head + ".")
    try:
        return replace(obj, **updates)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_kv(lines: Iterable[str]) -> Dict[str, str]:
    items = {}
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        items[key.strip()] = value.strip()
    return items


def with_overrides(cfg: TrainConfig, items: Dict[str, str]) -> TrainConfig:
    return _apply(cfg, items)


def load_config(path, overrides: Dict[str, str] = None) -> TrainConfig:
    items = parse_kv(Path(path).read_text(encoding="utf-8").splitlines())
    items.update(overrides or {})
    return _apply(TrainConfig(), items)


def dump_config(cfg, prefix: str = "") -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            lines.append(dump_config(value, prefix + f.name + ".").rstrip("\n"))
        else:
            lines.append(f"{prefix}{f.name}={value}")
    return "\n".join(lines) + "\n"
