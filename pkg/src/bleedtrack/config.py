"""Run configuration: one JSON document mirroring every config dataclass, plus a resolved echo."""

from __future__ import annotations

import json
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .detect_train import DetectTrainConfig
from .metrics import MetricConfig
from .onset import OnsetConfig
from .onset_train import OnsetTrainConfig
from .pseudo import KalmanConfig, MatchConfig
from .track import RefreshPolicy, TrackerConfig
from .track_train import FinetuneConfig, PretrainConfig
from .video import write_json


@dataclass(frozen=True)
class CorpusConfig:
    width: int = 128
    height: int = 96
    length: int = 150
    onset_frame: int = 120
    preset: str = "moderate"
    split_seed: int = 0
    max_drop: int = 60


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    onset: OnsetConfig = field(default_factory=OnsetConfig)
    onset_train: OnsetTrainConfig = field(default_factory=OnsetTrainConfig)
    detect_train: DetectTrainConfig = field(default_factory=DetectTrainConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    kalman: KalmanConfig = field(default_factory=KalmanConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    refresh: RefreshPolicy = field(default_factory=RefreshPolicy)
    metric: MetricConfig = field(default_factory=MetricConfig)


def build(cls, data: dict | None):
    """Instantiate dataclass ``cls`` from a (partial) dict, recursing into nested dataclasses."""
    data = dict(data or {})
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        t = hints[f.name]
        if is_dataclass(t) and isinstance(v, dict):
            v = build(t, v)
        elif isinstance(v, list):
            v = tuple(v)
        kw[f.name] = v
    return cls(**kw)


def load_config(path: Path | str | None, overrides: dict | None = None) -> RunConfig:
    data = {}
    if path is not None:
        with open(path) as fh:
            data = json.load(fh)
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return build(RunConfig, data)


def to_json(cfg) -> dict:
    return asdict(cfg)


def echo_config(cfg: RunConfig, out_dir: Path | str, command: str, seed: int, extra: dict | None = None) -> Path:
    path = Path(out_dir) / "config.resolved.json"
    write_json(path, {"command": command, "seed": seed, "config": to_json(cfg), **(extra or {})})
    return path

