"""Self-describing checkpoints: weights plus the config needed to rebuild the model."""

from __future__ import annotations

import io
import json
from dataclasses import asdict, fields, is_dataclass
from pathlib import Path
from typing import Any

import torch

from .adapters import AdapterConfig, apply_adapters
from .detect import SourceDetector
from .onset import OnsetConfig, OnsetDetector
from .track import PointTrackerNet, TrackerConfig

FORMAT_VERSION = 1
KINDS = ("onset", "detect", "track")


class CheckpointError(ValueError):
    pass


def _config_json(cfg) -> dict:
    return asdict(cfg) if is_dataclass(cfg) else dict(cfg)


def _from_json(cls, d: dict):
    names = {f.name for f in fields(cls)}
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in names}
    return cls(**kw)


def save_checkpoint(path: Path | str, kind: str, model: torch.nn.Module, config: Any = None,
                    extra: dict | None = None) -> Path:
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": FORMAT_VERSION, "kind": kind, "config": _config_json(config) if config is not None else {},
              "extra": extra or {}}
    if kind == "detect":
        header["config"] = {"work_size": list(model.work_size), "channels": model.encoder.channels}
    state = {k: v.detach().cpu() for k, v in model.state_dict().items()}
    buf = io.BytesIO()
    torch.save({"header": json.dumps(header, sort_keys=True), "state": state}, buf)
    path.write_bytes(buf.getvalue())
    return path


def read_header(path: Path | str) -> dict:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    return json.loads(blob["header"])


def load_checkpoint(path: Path | str, kind: str | None = None) -> tuple[torch.nn.Module, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        header = json.loads(blob["header"])
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format')}")
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path} holds a {header['kind']!r} model, expected {kind!r}")
    cfg = header["config"]
    if header["kind"] == "onset":
        model = OnsetDetector(_from_json(OnsetConfig, cfg))
    elif header["kind"] == "detect":
        model = SourceDetector(cfg.get("channels", 32), tuple(cfg.get("work_size", (64, 48))))
    else:
        model = PointTrackerNet(_from_json(TrackerConfig, cfg))
        ad = header["extra"].get("adapters")
        if ad:
            apply_adapters(model, _from_json(AdapterConfig, ad))
    model.load_state_dict(blob["state"])
    return model.eval(), header
