"""Run configuration: one nested file (TOML or JSON) for every pipeline stage."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import tomli

from .losses import LossWeights
from .serialize import atomic_write_text, dump_json

RESOLVED_NAME = "config.json"


class ConfigError(ValueError):
    """The configuration file is missing, malformed or inconsistent."""


@dataclass
class Paths:
    corpus: str = ""
    corpus_format: str = "abc"
    work: str = "run"
    # the rest default to locations under ``work`` when left empty
    vocab: str = ""
    checkpoints: str = ""
    questions: str = ""
    reports: str = ""


@dataclass
class ModelSection:
    emb_dim: int = 200
    hidden: int = 600
    layers: int = 2
    relaxed: bool = True
    dropout: float = 0.5
    dtype: str = "float64"


@dataclass
class DataSection:
    vocab_cutoff: int = 3
    bars_per_sentence: int = 4
    split: tuple[float, float, float] = (8.0, 1.0, 1.0)


@dataclass
class PretrainSection:
    epochs: int = 30
    batch_size: int = 20
    lr: float = 1e-4
    clip_ratio: float = 1.0


@dataclass
class BiLmSection:
    emb_dim: int = 200
    hidden: int = 600
    layers: int = 2
    dropout: float = 0.5
    dtype: str = "float64"
    epochs: int = 50
    batch_size: int = 20
    lr: float = 1e-4
    mask_rate: float = 0.15


@dataclass
class TrainSection:
    batch_size: int = 16
    nu: int | None = None
    epochs: int = 50
    lr: float = 1e-4
    sampler: str = "batch-nce"
    checkpoint_interval: int = 5
    clip_ratio: float = 1.0
    detach_noise: bool = False
    weights: tuple[float, float, float] = (0.1, 10.0, 0.1)


@dataclass
class QuestionSection:
    k: int = 8
    count: int | None = None
    modes: tuple[str, ...] = ("batch-neg",)
    mask_rate: float = 0.15


@dataclass
class RunConfig:
    seed: int = 0
    criterion: int = 2
    paths: Paths = field(default_factory=Paths)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    bilm: BiLmSection = field(default_factory=BiLmSection)
    train: TrainSection = field(default_factory=TrainSection)
    questions: QuestionSection = field(default_factory=QuestionSection)

    def validate(self) -> "RunConfig":
        if self.criterion not in (1, 2):
            raise ConfigError(f"criterion must be 1 or 2, got {self.criterion}")
        if self.paths.corpus_format not in ("abc", "text"):
            raise ConfigError(f"unknown corpus format {self.paths.corpus_format!r}")
        if self.train.sampler not in ("batch-nce", "resampling"):
            raise ConfigError(f"unknown sampler {self.train.sampler!r}")
        for mode in self.questions.modes:
            if mode not in ("batch-neg", "resampled"):
                raise ConfigError(f"unknown question mode {mode!r}")
        if len(self.train.weights) != 3:
            raise ConfigError(f"train.weights needs three values, got {len(self.train.weights)}")
        try:
            LossWeights(*self.train.weights)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad loss weights: {exc}") from exc
        if self.questions.k < 2:
            raise ConfigError("questions.k must be at least 2")
        return self

    @property
    def weights(self) -> LossWeights:
        return LossWeights(*self.train.weights)

    # resolved locations
    @property
    def work(self) -> Path:
        return Path(self.paths.work)

    def location(self, name: str) -> Path:
        explicit = getattr(self.paths, name)
        if explicit:
            return Path(explicit)
        default = {"vocab": "prep/vocab.txt", "checkpoints": "nce", "questions": "questions",
                   "reports": "reports"}[name]
        return self.work / default

    def to_json(self) -> dict:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}" if where else name)
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}.{name}: expected a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = _check_scalar(current, value, f"{where}.{name}" if where else name)
    return cls(**kwargs)


def _check_scalar(default, value, where: str):
    if default is None:
        ok = value is None or (isinstance(value, int) and not isinstance(value, bool))
    elif isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__ if default is not None else 'int'}, "
                          f"got {value!r}")
    return value


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_config(path: str | os.PathLike | None) -> RunConfig:
    """Read TOML (or JSON by extension); ``None`` gives the defaults."""
    if path is None:
        return RunConfig().validate()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        if p.suffix.lower() == ".json":
            data = json.loads(p.read_text(encoding="utf-8"))
        else:
            data = tomli.loads(p.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, tomli.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    return from_dict(data)


def override(cfg: RunConfig, **changes: Any) -> RunConfig:
    """Apply command-line overrides given as dotted keys (``train.sampler``)."""
    data = cfg.to_json()
    for key, value in changes.items():
        if value is None:
            continue
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = list(value) if isinstance(value, tuple) else value
    return from_dict(data)


def write_resolved(cfg: RunConfig, directory: str | os.PathLike) -> Path:
    path = Path(directory) / RESOLVED_NAME
    atomic_write_text(path, dump_json(cfg.to_json()))
    return path
