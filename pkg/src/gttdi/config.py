"""TOML experiment configuration."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import tomli
import tomli_w

from .pipeline import EmbedConfig, EvalConfig, ExperimentConfig, GraphConfig, ModelSettings
from .scenario import ScenarioConfig
from .semantic import LABELS
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


@dataclass(frozen=True)
class Paths:
    data: str = "data.csv"
    network: str = "network.json"
    corrupted: str = "corrupted.bin"
    edges: str = "edges.txt"
    embeddings: str = "embeddings.txt"
    checkpoint: str = "checkpoint.bin"
    train_log: str = "train_log.jsonl"
    imputed: str = "imputed.bin"
    reports: str = "reports"


@dataclass(frozen=True)
class RunConfig:
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    paths: Paths = field(default_factory=Paths)
    workers: int = 1


_SECTIONS = {
    "scenario": ScenarioConfig,
    "train": TrainConfig,
    "model": ModelSettings,
    "embed": EmbedConfig,
    "graph": GraphConfig,
    "eval": EvalConfig,
}


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, enum.Enum):
        return value.value
    return value


def to_dict(cfg: RunConfig) -> dict:
    exp = cfg.experiment
    out = {"seed": exp.seed, "workers": cfg.workers}
    for name in _SECTIONS:
        section = getattr(exp, name)
        out[name] = {f.name: _plain(getattr(section, f.name)) for f in fields(section)}
    out["paths"] = dataclasses.asdict(cfg.paths)
    return out


def _build(cls, table: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(table) - set(known)
    if unknown:
        raise ConfigError(where, f"unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in table.items():
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(where, str(exc)) from None


def from_dict(obj: dict, where: str = "<config>") -> RunConfig:
    top = {"seed", "workers", "paths", *_SECTIONS}
    unknown = set(obj) - top
    if unknown:
        raise ConfigError(where, f"unknown sections {sorted(unknown)}")
    sections = {name: _build(cls, obj.get(name, {}), f"{where}[{name}]") for name, cls in _SECTIONS.items()}
    ev = sections["eval"]
    if set(ev.labels) - set(LABELS):
        raise ConfigError(f"{where}[eval]", f"unknown labels {sorted(set(ev.labels) - set(LABELS))}")
    exp = ExperimentConfig(seed=int(obj.get("seed", 0)), **sections)
    paths = _build(Paths, obj.get("paths", {}), f"{where}[paths]")
    return RunConfig(exp, paths, int(obj.get("workers", 1)))


def load(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        obj = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(path, f"malformed TOML: {exc}") from None
    return from_dict(obj, str(path))


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(to_dict(cfg), sort_keys=True).encode()).hexdigest()


def with_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    return replace(cfg, experiment=replace(cfg.experiment, seed=seed))
