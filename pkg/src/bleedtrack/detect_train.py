"""Training for the source detector on the labelled onset frame plus flow-propagated pseudo frames."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .detect import (DetectPseudoConfig, FlowUnavailable, SourceDetector, SpatialLossConfig,
                     gaussian_target, propagate_pseudo, soft_argmax, spatial_loss, to_work_coords)
from .video import AnnotatedPoint, Clip, ClipLabels

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectTrainConfig:
    epochs: int = 30
    lr: float = 3e-3
    batch: int = 4
    pseudo_per_step: int | None = 3   # random subset of the n pseudo frames per step; None uses all
    seed: int = 0
    loss: SpatialLossConfig = field(default_factory=SpatialLossConfig)
    pseudo: DetectPseudoConfig = field(default_factory=DetectPseudoConfig)
    use_pseudo: bool = True


@dataclass
class DetectSample:
    clip_id: str
    image: np.ndarray
    point: tuple[float, float]
    pseudo_images: list[np.ndarray]
    pseudo_points: list[tuple[float, float]]


def detect_sample(clip: Clip, labels: ClipLabels, cfg: DetectTrainConfig = DetectTrainConfig()) -> DetectSample | None:
    """Frame ``g`` is the labelled onset; its point must be annotated. Onset predictions are never used."""
    g = labels.onset_frame
    if g is None:
        return None
    point = labels.point_at(g)
    if point is None:
        log.info("clip %s has no point label at its onset frame; skipped", clip.id)
        return None
    images, points = [], []
    if cfg.use_pseudo and g + cfg.pseudo.n < len(clip):
        try:
            path = propagate_pseudo(clip, g, point, cfg.pseudo, return_path=True)
            images = [clip[p.frame_index].image for p in path[1:]]
            points = [p.xy for p in path[1:]]
        except FlowUnavailable as exc:
            log.info("no pseudo labels for %s: %s", clip.id, exc)
    return DetectSample(clip.id, clip[g].image, point.xy, images, points)


def _targets(det: SourceDetector, points, frame_size, sigma: float) -> tuple[torch.Tensor, torch.Tensor]:
    W, H = det.work_size
    work = [to_work_coords(p, det.work_size, frame_size) for p in points]
    work = [(float(np.clip(x, 0, W - 1e-3)), float(np.clip(y, 0, H - 1e-3))) for x, y in work]
    maps = np.stack([gaussian_target(p, sigma, (H, W)) for p in work])
    return torch.as_tensor(maps, dtype=torch.float32), torch.as_tensor(work, dtype=torch.float32)


def sample_loss(det: SourceDetector, batch: Sequence[DetectSample], cfg: DetectTrainConfig,
                rng: np.random.Generator | None = None) -> torch.Tensor:
    W, H = det.work_size
    frame_size = (batch[0].image.shape[1], batch[0].image.shape[0])
    sigma = cfg.loss.sigma_for(W, H)
    x, r = det.prepare([s.image for s in batch])
    fused, _ = det(x, r)
    H_gt, P_gt = _targets(det, [s.point for s in batch], frame_size, sigma)
    P_pred = soft_argmax(fused)
    total = fused.new_zeros(())
    for i, s in enumerate(batch):
        pseudo_maps, pseudo_preds = [], []
        if s.pseudo_images:
            idx = np.arange(len(s.pseudo_images))
            if cfg.pseudo_per_step is not None and rng is not None and len(idx) > cfg.pseudo_per_step:
                idx = np.sort(rng.choice(idx, cfg.pseudo_per_step, replace=False))
            xp, rp = det.prepare([s.pseudo_images[j] for j in idx])
            fp, _ = det(xp, rp)
            maps, _ = _targets(det, [s.pseudo_points[j] for j in idx], frame_size, sigma)
            pseudo_maps = list(maps)
            pseudo_preds = list(fp)
        total = total + spatial_loss(fused[i], H_gt[i], pseudo_maps, P_pred[i], P_gt[i], cfg.loss,
                                     pseudo_preds=pseudo_preds if pseudo_maps else None)
    return total / len(batch)


def train_detector(samples: Sequence[DetectSample], cfg: DetectTrainConfig = DetectTrainConfig(),
                   init: SourceDetector | None = None) -> tuple[SourceDetector, dict]:
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    det = init or SourceDetector()
    opt = torch.optim.Adam(det.parameters(), lr=cfg.lr)
    history = {"epoch_loss": [], "n_samples": len(samples),
               "n_pseudo": int(sum(len(s.pseudo_images) for s in samples))}
    t0 = time.perf_counter()
    det.train()
    for ep in range(cfg.epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for b in range(0, len(order), cfg.batch):
            batch = [samples[i] for i in order[b:b + cfg.batch]]
            loss = sample_loss(det, batch, cfg, rng)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(det.parameters(), 5.0)
            opt.step()
            total += loss.item() * len(batch)
        history["epoch_loss"].append(total / max(1, len(samples)))
        log.info("detect epoch %d loss %.4f", ep, history["epoch_loss"][-1])
    history["train_time_s"] = time.perf_counter() - t0
    return det.eval(), history


def train_config_json(cfg: DetectTrainConfig) -> dict:
    return asdict(cfg)
