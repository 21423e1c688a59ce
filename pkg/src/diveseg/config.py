"""Run configuration and its flat ``key = value`` text format.

Keys are ``seed``, ``output_dir``, ``log_every``, ``checkpoint_every`` at top
level and ``model.*``, ``data.*``, ``optim.*``, ``loss.*`` for the sections;
see ``configs/default.cfg`` for every key with its default. Lines starting
with ``#`` are comments. Unknown keys are errors. Tuples are comma-separated.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .criterion import LossWeights
from .model import ModelConfig

OUTPUT_DIR_ENV = "DIVESEG_OUTPUT_DIR"


@dataclass
class DataConfig:
    source: str = "synth"  # "synth" or a COCO-format directory
    train_count: int = 20  # synthetic only
    eval_count: int = 20  # synthetic only
    eval_split: str = "val"  # "train" evaluates on the training samples
    class_agnostic: bool = False
    missing_images: str = "fail"

    def __post_init__(self) -> None:
        if self.train_count <= 0 or self.eval_count <= 0:
            raise ValueError("sample counts must be positive")
        if self.eval_split not in ("train", "val"):
            raise ValueError("eval_split must be 'train' or 'val'")
        if self.missing_images not in ("fail", "skip"):
            raise ValueError("missing_images must be 'fail' or 'skip'")


@dataclass
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    iterations: int = 30000
    milestones: tuple[int, ...] = (23000, 27000)
    decay: float = 0.1
    batch_size: int = 8
    warmup_fraction: float = 0.01

    def __post_init__(self) -> None:
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.lr <= 0 or self.decay <= 0 or self.weight_decay < 0:
            raise ValueError("learning rate and decay factor must be positive, weight decay non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.milestones and self.iterations and self.milestones[-1] >= self.iterations:
            raise ValueError(f"milestones {self.milestones} must lie below iterations {self.iterations}")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in [0, 1)")

    @property
    def warmup_iters(self) -> int:
        return int(round(self.warmup_fraction * self.iterations))


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    output_dir: str = "runs/default"
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0  # 0: final checkpoint only

    def __post_init__(self) -> None:
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    def to_text(self) -> str:
        return "\n".join(f"{k} = {format_value(v)}" for k, v in flatten(self).items()) + "\n"


_SECTIONS = ("model", "data", "optim", "loss")


def flatten(config: RunConfig) -> dict[str, object]:
    out: dict[str, object] = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if f.name in _SECTIONS:
            for sub in dataclasses.fields(value):
                out[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
        else:
            out[f.name] = value
    return out


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse(raw: str, type_name: str, key: str):
    raw = raw.strip()
    try:
        if type_name == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        if type_name.startswith("tuple"):
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError as exc:
        raise ValueError(f"bad value for {key} ({type_name}): {raw!r}") from exc


def _field_types() -> dict[str, str]:
    types: dict[str, str] = {}
    defaults = RunConfig()
    for f in dataclasses.fields(RunConfig):
        if f.name in _SECTIONS:
            for sub in dataclasses.fields(type(getattr(defaults, f.name))):
                types[f"{f.name}.{sub.name}"] = str(sub.type)
        else:
            types[f.name] = str(f.type)
    return types


def from_mapping(values: dict[str, str]) -> RunConfig:
    """Build a config from raw string values; missing keys take defaults."""
    types = _field_types()
    unknown = sorted(set(values) - set(types))
    if unknown:
        raise KeyError(f"unknown config keys: {unknown}")
    sections: dict[str, dict] = {s: {} for s in _SECTIONS}
    top: dict[str, object] = {}
    for key, raw in values.items():
        value = _parse(raw, types[key], key)
        if "." in key:
            section, name = key.split(".", 1)
            sections[section][name] = value
        else:
            top[key] = value
    return RunConfig(
        model=ModelConfig(**sections["model"]),
        data=DataConfig(**sections["data"]),
        optim=OptimConfig(**sections["optim"]),
        loss=LossWeights(**sections["loss"]),
        **top,
    )


def parse_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key}")
        values[key] = raw
    return values


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read a config file (or start from defaults), apply overrides, then the env override.

    ``DIVESEG_OUTPUT_DIR`` replaces ``output_dir``; it is applied here, at the
    entry point, so configs derived later with :func:`replace` keep their own
    output directories.
    """
    values = parse_text(Path(path).read_text()) if path is not None else {}
    values.update(overrides or {})
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        values["output_dir"] = env
    return from_mapping(values)


def replace(config: RunConfig, **changes: str | int | float | bool) -> RunConfig:
    """Copy with flat-key changes, e.g. ``replace(cfg, **{"model.use_aligner": False})``."""
    values = {k: format_value(v) for k, v in flatten(config).items()}
    values.update({k: format_value(v) for k, v in changes.items()})
    return from_mapping(values)
