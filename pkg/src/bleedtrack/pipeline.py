"""End-to-end runs: onset -> source point -> tracking, in evaluation or deployment mode.

Evaluation mode predicts the onset for reporting only. Detection runs on the
labelled onset frame and tracking starts from the labelled point, so
downstream numbers never depend on onset quality. Deployment mode uses
streaming onset; detection and tracking start from the predicted frame.
"""

from __future__ import annotations

import logging
import resource
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .detect import SourceDetector, detect_point
from .onset import OnsetDetector, OnsetResult, PairCache, locate_onset
from .track import PointTrackerNet, RefreshPolicy, track_clip
from .video import Clip, ClipLabels

log = logging.getLogger(__name__)

MODES = ("evaluation", "deployment")


@dataclass
class Models:
    onset: OnsetDetector
    detector: SourceDetector
    tracker: PointTrackerNet


@dataclass
class PipelineRun:
    mode: str
    clip_id: str
    status: str                                  # bleeding | non-bleeding
    onset: OnsetResult | None
    detected_point: tuple[int, int] | None
    init: tuple[int, tuple[float, float]] | None
    track: list[tuple[int, float, float, float]] = field(default_factory=list)   # frame, x, y, confidence
    timings: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "clip_id": self.clip_id,
            "status": self.status,
            "onset_frame": None if self.onset is None else self.onset.onset_frame,
            "contributing_window": None if self.onset is None else self.onset.contributing_window,
            "detected_point": None if self.detected_point is None else list(self.detected_point),
            "init": None if self.init is None else {"frame": self.init[0], "x": self.init[1][0], "y": self.init[1][1]},
            "track": [{"frame": f, "x": x, "y": y, "confidence": c} for f, x, y, c in self.track],
        }


def run_pipeline(clip: Clip, labels: ClipLabels | None, mode: str, models: Models,
                 policy: RefreshPolicy = RefreshPolicy()) -> PipelineRun:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    timings = {}
    t = time.perf_counter()
    onset = locate_onset(clip, models.onset.cfg, models.onset, "offline" if mode == "evaluation" else "streaming")
    timings["onset_s"] = time.perf_counter() - t
    if mode == "evaluation":
        if labels is None or labels.onset_frame is None:
            return PipelineRun(mode, clip.id, "non-bleeding", onset, None, None, timings=timings)
        t_gt = labels.onset_frame
        P_gt = labels.point_at(t_gt)
        if P_gt is None:
            raise ValueError(f"clip {clip.id} has no point label at its onset frame {t_gt}")
        t = time.perf_counter()
        detected = detect_point(models.detector, clip[t_gt])
        timings["detect_s"] = time.perf_counter() - t
        init = (t_gt, P_gt.xy)
    else:
        if onset.onset_frame is None:
            log.info("clip %s: no window above the confidence threshold; non-bleeding", clip.id)
            return PipelineRun(mode, clip.id, "non-bleeding", onset, None, None, timings=timings)
        t_b = int(np.clip(onset.onset_frame, 0, len(clip) - 1))
        t = time.perf_counter()
        detected = detect_point(models.detector, clip[t_b])
        timings["detect_s"] = time.perf_counter() - t
        init = (t_b, (float(detected[0]), float(detected[1])))
    t = time.perf_counter()
    out = track_clip(clip, init, models.tracker, policy)
    timings["track_s"] = time.perf_counter() - t
    track = [(init[0] + i, p[0], p[1], c) for i, (p, c) in enumerate(out)]
    return PipelineRun(mode, clip.id, "bleeding", onset, detected, init, track, timings)


# --------------------------------------------------------------------------- efficiency


def _params(model: torch.nn.Module) -> int:
    return int(sum(p.numel() for p in model.parameters()))


def _rate(fn, n: int, warmup: int = 2) -> dict[str, float]:
    for _ in range(warmup):
        fn(0)
    t0 = time.perf_counter()
    for i in range(n):
        fn(i)
    elapsed = time.perf_counter() - t0
    return {"fps": n / elapsed, "latency_ms": 1000.0 * elapsed / n, "frames": n}


def measure_efficiency(models: Models, clip: Clip, frames: int = 20, repeats: int = 3) -> dict:
    """Per-stage compute-only throughput on ``clip`` plus parameter counts and peak resident memory."""
    torch.set_num_threads(1)
    images = clip.images()
    n = min(frames, len(images) - 1)
    cfg = models.onset.cfg
    head = models.onset.head

    def onset_step(i):
        # one new frame: adjacent pair, keyframe pair, gate and head tokens
        cache = PairCache(images[i:i + 2])
        with torch.no_grad():
            raw = torch.as_tensor(np.stack([cache.raw(0, 1), cache.raw(0, 1)]).astype(np.float32))
            models.onset.gate(raw[:1])
            vec = head.pair_vectors(raw)
            head.forward_tokens(vec[0].expand(1, cfg.window_N, -1), vec[1].expand(1, cfg.window_N, -1))

    def detect_step(i):
        detect_point(models.detector, images[i])

    from .track import init_track, step
    state = {"s": init_track(images[0], (clip.width / 2, clip.height / 2), models.tracker)}

    def track_step(i):
        _, _, state["s"] = step(state["s"], images[1 + i % n], models.tracker)

    stages = {"onset": onset_step, "detect": detect_step, "track": track_step}
    report = {"resolution": [clip.width, clip.height], "stages": {}, "params": {
        "onset": _params(models.onset), "detect": _params(models.detector), "track": _params(models.tracker)}}
    for name, fn in stages.items():
        runs = [_rate(fn, n) for _ in range(repeats)]
        fps = [r["fps"] for r in runs]
        report["stages"][name] = {
            "fps": float(np.median(fps)),
            "latency_ms": float(np.median([r["latency_ms"] for r in runs])),
            "fps_runs": fps,
            "fps_spread": float((max(fps) - min(fps)) / np.median(fps)),
        }
    total_latency = sum(s["latency_ms"] for s in report["stages"].values())
    report["pipeline"] = {"latency_ms": total_latency, "fps": 1000.0 / total_latency}
    report["peak_rss_mb"] = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0   # kB on Linux
    return report
