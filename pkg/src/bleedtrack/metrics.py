"""Onset and tracking metrics, with per-scenario breakdowns.

Pixel thresholds are defined at a 640-pixel reference diagonal and scaled by
``diagonal / 640`` for other resolutions, so 100 px becomes 25 px at 128x96.
A missing onset prediction (``None``) counts as a miss and is excluded from
the error averages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .video import SCENARIOS

REFERENCE_DIAGONAL = 640.0


@dataclass(frozen=True)
class MetricConfig:
    frame_tolerances: tuple[int, ...] = (0, 1, 2, 4, 8)
    pixel_thresholds: tuple[float, ...] = (10, 25, 50, 75, 100)
    reference_diagonal: float = REFERENCE_DIAGONAL

    def __post_init__(self):
        for name in ("frame_tolerances", "pixel_thresholds"):
            v = tuple(getattr(self, name))
            if list(v) != sorted(v):
                raise ValueError(f"{name} must be sorted ascending")
            object.__setattr__(self, name, v)

    def scaled_thresholds(self, diagonal: float) -> dict[float, float]:
        s = diagonal / self.reference_diagonal
        return {d: d * s for d in self.pixel_thresholds}


def _check(preds: Sequence, gts: Sequence) -> None:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if len(preds) == 0:
        raise ValueError("empty input")


def frame_accuracy(preds: Sequence[int | None], gts: Sequence[int], k: int) -> float:
    """Fraction with ``|t_gt - t_pred| <= k``; a ``None`` prediction is a miss."""
    _check(preds, gts)
    hits = sum(1 for p, g in zip(preds, gts) if p is not None and abs(g - p) <= k)
    return hits / len(preds)


def avg_frame_error(preds: Sequence[int | None], gts: Sequence[int]) -> tuple[float, float]:
    """(signed mean of ``t_gt - t_pred``, mean absolute error) over non-missing predictions."""
    _check(preds, gts)
    diffs = [g - p for p, g in zip(preds, gts) if p is not None]
    if not diffs:
        return math.nan, math.nan
    d = np.asarray(diffs, dtype=float)
    return float(d.mean()), float(np.abs(d).mean())


def _distances(preds, gts) -> np.ndarray:
    _check(preds, gts)
    p = np.asarray(preds, dtype=float).reshape(-1, 2)
    g = np.asarray(gts, dtype=float).reshape(-1, 2)
    return np.hypot(p[:, 0] - g[:, 0], p[:, 1] - g[:, 1])


def point_accuracy(preds, gts, d: float) -> float:
    """Fraction of points within Euclidean distance ``d`` (inclusive)."""
    return float(np.mean(_distances(preds, gts) <= d))


def avg_point_error(preds, gts) -> float:
    return float(np.mean(_distances(preds, gts)))


@dataclass
class MetricsReport:
    frame_acc: dict[int, float] = field(default_factory=dict)
    err_avg_ibf_signed: float = math.nan
    err_avg_ibf_abs: float = math.nan
    point_acc: dict[float, float] = field(default_factory=dict)
    err_avg_px: float = math.nan
    thresholds_px: dict[float, float] = field(default_factory=dict)
    n_clips: int = 0
    n_points: int = 0
    n_missing_onsets: int = 0
    scenarios: dict[str, "MetricsReport"] = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "frame_acc": {str(k): v for k, v in self.frame_acc.items()},
            "err_avg_ibf_signed": _num(self.err_avg_ibf_signed),
            "err_avg_ibf_abs": _num(self.err_avg_ibf_abs),
            "point_acc": {_key(d): v for d, v in self.point_acc.items()},
            "err_avg_px": _num(self.err_avg_px),
            "thresholds_px": {_key(d): v for d, v in self.thresholds_px.items()},
            "n_clips": self.n_clips,
            "n_points": self.n_points,
            "n_missing_onsets": self.n_missing_onsets,
        }
        if self.scenarios:
            out["scenarios"] = {k: v.to_json() for k, v in self.scenarios.items()}
        return out

    def rows(self, scenario: str = "all") -> list[tuple[str, str, float | None, int, str]]:
        """CSV rows: metric, threshold, value, n, scenario."""
        rows = []
        for k, v in self.frame_acc.items():
            rows.append(("frame_acc", str(k), v, self.n_clips, scenario))
        if self.n_clips:
            rows.append(("err_avg_ibf_signed", "", _num(self.err_avg_ibf_signed), self.n_clips, scenario))
            rows.append(("err_avg_ibf_abs", "", _num(self.err_avg_ibf_abs), self.n_clips, scenario))
        for d, v in self.point_acc.items():
            rows.append(("point_acc", _key(d), v, self.n_points, scenario))
        if self.n_points:
            rows.append(("err_avg_px", "", _num(self.err_avg_px), self.n_points, scenario))
        for name, sub in self.scenarios.items():
            rows.extend(sub.rows(name))
        return rows


def _num(x: float) -> float | None:
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)


def _key(d: float) -> str:
    return str(int(d)) if float(d).is_integer() else str(d)


def onset_metrics(preds: Sequence[int | None], gts: Sequence[int], cfg: MetricConfig = MetricConfig(),
                  report: MetricsReport | None = None) -> MetricsReport:
    report = report or MetricsReport()
    report.frame_acc = {k: frame_accuracy(preds, gts, k) for k in cfg.frame_tolerances}
    report.err_avg_ibf_signed, report.err_avg_ibf_abs = avg_frame_error(preds, gts)
    report.n_clips = len(preds)
    report.n_missing_onsets = sum(p is None for p in preds)
    return report


def point_metrics(preds, gts, diagonal: float, cfg: MetricConfig = MetricConfig(),
                  report: MetricsReport | None = None) -> MetricsReport:
    report = report or MetricsReport()
    scaled = cfg.scaled_thresholds(diagonal)
    report.thresholds_px = scaled
    report.point_acc = {d: point_accuracy(preds, gts, px) for d, px in scaled.items()}
    report.err_avg_px = avg_point_error(preds, gts)
    report.n_points = len(preds)
    return report


def scenario_breakdown(preds, gts, tags: Sequence[Iterable[str]], diagonal: float,
                       cfg: MetricConfig = MetricConfig()) -> dict[str, MetricsReport]:
    """Point metrics per scenario tag. Every one of the six tags gets an entry, possibly empty."""
    if len(tags) != len(preds):
        raise ValueError("one tag set per prediction")
    out = {}
    for name in SCENARIOS:
        idx = [i for i, t in enumerate(tags) if name in t]
        if idx:
            out[name] = point_metrics([preds[i] for i in idx], [gts[i] for i in idx], diagonal, cfg)
        else:
            out[name] = MetricsReport(thresholds_px=cfg.scaled_thresholds(diagonal))
    return out
