"""Metric reports (JSON + CSV) and overlay videos."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .metrics import MetricsReport
from .video import Clip, write_json

REPORT_VERSION = 1
CSV_COLUMNS = ("metric", "threshold", "value", "n", "scenario")

GREEN = (0, 255, 0)      # prediction
BLUE = (0, 0, 255)       # ground truth
WHITE = (255, 255, 255)


def emit_report(out_dir: Path | str, sections: dict[str, MetricsReport], extra: dict | None = None,
                name: str = "report") -> tuple[Path, Path]:
    """Write ``<name>.json`` and ``<name>.csv``. Section keys prefix the CSV metric names."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = {"version": REPORT_VERSION, **{k: v.to_json() for k, v in sections.items()}}
    if extra:
        body.update(extra)
    json_path = out / f"{name}.json"
    write_json(json_path, _clean(body))
    csv_path = out / f"{name}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for section, rep in sections.items():
            for metric, thr, value, n, scenario in rep.rows():
                w.writerow((f"{section}.{metric}", thr, "" if value is None else repr(float(value)), n, scenario))
    return json_path, csv_path


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if math.isnan(float(obj)) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_track_csv(path: Path | str, track: Sequence[tuple[int, float, float, float]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("frame", "x", "y", "confidence"))
        for f, x, y, c in track:
            w.writerow((int(f), f"{x:.4f}", f"{y:.4f}", f"{c:.4f}"))
    return path


def write_overlay(path: Path | str, clip: Clip, predictions: dict[int, tuple[float, float, float]],
                  ground_truth: dict[int, tuple[float, float]] | None = None, fps: float | None = None,
                  scale: int = 4) -> Path:
    """MJPG .avi with predicted (green) and ground-truth (blue) points and white confidence text.

    Every clip frame is written, annotated or not.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    W, H = clip.width * scale, clip.height * scale
    writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"MJPG"), fps or clip.fps or 30.0, (W, H))
    if not writer.isOpened():
        raise OSError(f"cannot open video writer for {path}")
    try:
        for t in range(len(clip)):
            img = cv2.resize(clip[t].image, (W, H), interpolation=cv2.INTER_NEAREST)
            bgr = cv2.cvtColor(img, cv2.COLOR_RGB2BGR)
            if ground_truth and t in ground_truth:
                gx, gy = ground_truth[t]
                cv2.circle(bgr, _px(gx, gy, scale), 4, BLUE[::-1], 2)
            if t in predictions:
                x, y, c = predictions[t]
                cv2.circle(bgr, _px(x, y, scale), 4, GREEN[::-1], 2)
                cv2.putText(bgr, f"{c:.2f}", (_px(x, y, scale)[0] + 6, _px(x, y, scale)[1] - 6),
                            cv2.FONT_HERSHEY_SIMPLEX, 0.4, WHITE, 1, cv2.LINE_AA)
            writer.write(bgr)
    finally:
        writer.release()
    return path


def _px(x: float, y: float, scale: int) -> tuple[int, int]:
    return int(round((x + 0.5) * scale - 0.5)), int(round((y + 0.5) * scale - 0.5))


def count_video_frames(path: Path | str) -> int:
    cap = cv2.VideoCapture(str(path))
    n = 0
    while True:
        ok, _ = cap.read()
        if not ok:
            break
        n += 1
    cap.release()
    return n
