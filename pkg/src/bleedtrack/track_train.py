"""Tracker training: pretraining on synthetic ground truth, then adapter fine-tuning on sparse + pseudo labels."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .adapters import AdapterConfig, apply_adapters, parameter_counts, prune_ranks
from .pseudo import TrainSample
from .synth import SceneConfig, SynthGroundTruth, clip_seed, generate_scene, variant_config
from .track import PointTrackerNet, TrackerConfig, unroll
from .video import Clip

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrackLossConfig:
    alpha1: float = 0.6
    alpha2: float = 0.4
    huber_delta: float = 1.0


def huber(pred: torch.Tensor, target: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Huber per axis, summed over axes and averaged over points. Accepts (2,) or (M, 2)."""
    r = (pred - target).abs()
    per = torch.where(r <= delta, 0.5 * r ** 2, delta * (r - 0.5 * delta))
    return per.sum(-1).mean() if per.dim() > 1 else per.sum()


def tracking_loss(pred: torch.Tensor, gt: torch.Tensor, pseudo_preds: Sequence[torch.Tensor],
                  pseudo_gts: Sequence[torch.Tensor], cfg: TrackLossConfig = TrackLossConfig()) -> torch.Tensor:
    """``a1 * Huber(pred, gt) + (a2 / N) * sum_i Huber(pseudo_pred_i, pseudo_gt_i)``; pseudo term skipped at N = 0."""
    if len(pseudo_preds) != len(pseudo_gts):
        raise ValueError(f"{len(pseudo_preds)} pseudo predictions for {len(pseudo_gts)} pseudo labels")
    loss = cfg.alpha1 * huber(pred, gt, cfg.huber_delta)
    if pseudo_preds:
        loss = loss + cfg.alpha2 / len(pseudo_preds) * sum(
            huber(p, g, cfg.huber_delta) for p, g in zip(pseudo_preds, pseudo_gts))
    return loss


# --------------------------------------------------------------------------- pretraining


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 600
    seq_len: int = 12
    batch: int = 8
    lr: float = 2e-3
    seed: int = 0
    source_fraction: float = 0.5
    conf_weight: float = 0.2
    conf_px: float = 2.0
    margin: float = 4.0
    n_scenes: int = 24
    scene_length: int = 150
    scene_onset: int = 20


def pretrain_scenes(cfg: PretrainConfig, seed: int, width: int = 128, height: int = 96,
                    preset: str = "moderate") -> list[tuple[Clip, SynthGroundTruth]]:
    """Fresh synthetic scenes with exact tracks, independent of any labelled corpus."""
    base = SceneConfig(width=width, height=height, length=cfg.scene_length, onset_frame=cfg.scene_onset)
    return [generate_scene(variant_config(base, clip_seed(seed + 7919, i), preset), f"pretrain{i:03d}")
            for i in range(cfg.n_scenes)]


def _pick_tracks(rng: np.random.Generator, gt: SynthGroundTruth, t0: int, L: int, size, source: bool,
                 margin: float):
    W, H = size
    if source and t0 >= gt.onset_frame and gt.visibility[t0:t0 + L].all():
        return gt.source_track[t0:t0 + L].astype(float)
    for _ in range(20):
        xy = rng.uniform((margin, margin), (W - 1 - margin, H - 1 - margin))
        tr = gt.point_track(t0, xy)[t0:t0 + L]
        if (tr >= margin).all() and (tr[:, 0] <= W - 1 - margin).all() and (tr[:, 1] <= H - 1 - margin).all():
            return tr
    return None


def pretrain_tracker(scenes: Sequence[tuple[Clip, SynthGroundTruth]], cfg: PretrainConfig = PretrainConfig(),
                     model_cfg: TrackerConfig = TrackerConfig()) -> tuple[PointTrackerNet, dict]:
    """Supervised pretraining on exact synthetic tracks (source points and tissue points)."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = PointTrackerNet(model_cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=1e-4)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.lr, total_steps=cfg.steps, pct_start=0.1)
    history = {"loss": [], "err_px": []}
    t_start = time.perf_counter()
    L = cfg.seq_len
    for it in range(cfg.steps):
        feats, starts, tracks = [], [], []
        while len(tracks) < cfg.batch:
            clip, gt = scenes[int(rng.integers(len(scenes)))]
            if len(clip) <= L:
                continue
            t0 = int(rng.integers(0, len(clip) - L))
            tr = _pick_tracks(rng, gt, t0, L, (clip.width, clip.height), rng.random() < cfg.source_fraction,
                              cfg.margin)
            if tr is None:
                continue
            feats.append(model.encode(np.stack([clip[t].image for t in range(t0, t0 + L)])))
            tracks.append(tr)
        size = (scenes[0][0].width, scenes[0][0].height)
        enc = torch.stack(feats, 1)                              # (L, B, C, h, w)
        target = torch.as_tensor(np.stack(tracks, 1), dtype=enc.dtype)   # (L, B, 2)
        pos, conf = unroll(model, list(enc), target[0], size)
        loss = huber(pos[1:].reshape(-1, 2), target[1:].reshape(-1, 2))
        err = (pos[1:] - target[1:]).norm(dim=-1).detach()
        conf_target = (err < cfg.conf_px).to(conf.dtype)
        loss = loss + cfg.conf_weight * F.binary_cross_entropy(conf[1:].clamp(1e-6, 1 - 1e-6), conf_target)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        history["loss"].append(loss.item())
        history["err_px"].append(float(err.mean()))
        if it % 50 == 0 or it == cfg.steps - 1:
            log.info("pretrain step %d loss %.3f err %.2f px (%.0fs)", it, loss.item(), float(err.mean()),
                     time.perf_counter() - t_start)
    history["train_time_s"] = time.perf_counter() - t_start
    return model.eval(), history


# --------------------------------------------------------------------------- fine-tuning


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 3
    lr: float = 2e-3
    seed: int = 0
    chunk: int = 30
    pseudo_points: int = 4
    loss: TrackLossConfig = field(default_factory=TrackLossConfig)
    adapters: AdapterConfig = field(default_factory=AdapterConfig)
    prune_after_epoch: int = 0


def _defined(arr: np.ndarray) -> np.ndarray:
    return np.all(np.isfinite(arr), axis=-1)


def sample_loss(model: PointTrackerNet, clip: Clip, sample: TrainSample, human: dict[int, tuple[float, float]],
                cfg: FinetuneConfig, rng: np.random.Generator) -> Iterator[torch.Tensor]:
    """Loss terms for one sample, one per backward chunk.

    A generator: each chunk is built only after the caller has stepped on the
    previous one, so no graph outlives an optimizer update.

    The main term compares source predictions with human labels; the pseudo
    term pools the dense source labels and a few pseudo-point tracks.
    """
    size = (clip.width, clip.height)
    images = np.stack([clip[t].image for t in range(sample.start, sample.stop)])
    src = sample.source
    carry = None
    for s in range(0, len(images) - 1, cfg.chunk):
        e = min(len(images), s + cfg.chunk + 1)
        feats = list(model.encode(images[s:e])[:, None])
        if carry is None:
            start = torch.as_tensor(src[s:s + 1], dtype=feats[0].dtype)
            pos, _, carry = unroll(model, feats, start, size, return_carry=True)
            frames = range(s, e)
        else:
            pos, _, carry = unroll(model, feats[1:], None, size, carry=carry.detach(), return_carry=True)
            frames = range(s + 1, e)
        pos = pos[:, 0]
        main_p, main_g, ps_p, ps_g = [], [], [], []
        for k, t in enumerate(frames):
            if t == 0:
                continue
            abs_t = sample.start + t
            if abs_t in human:
                main_p.append(pos[k])
                main_g.append(torch.as_tensor(human[abs_t], dtype=pos.dtype))
            elif np.isfinite(src[t]).all():
                ps_p.append(pos[k])
                ps_g.append(torch.as_tensor(src[t], dtype=pos.dtype))
        # pseudo points that start inside this chunk, tracked for the rest of it
        if len(sample.points):
            begins = [i for i in range(len(sample.points)) if _defined(sample.points[i, s]) and
                      _defined(sample.points[i, s:e]).sum() > 1]
            chosen = rng.choice(begins, min(cfg.pseudo_points, len(begins)), replace=False) if begins else []
            if len(chosen):
                tr = sample.points[np.sort(chosen), s:e]                  # (n, l, 2)
                ok = _defined(tr).all(0)
                l = int(np.argmin(ok)) if not ok.all() else len(ok)
                if l > 1:
                    st = torch.as_tensor(tr[:, 0], dtype=pos.dtype)
                    pp, _ = unroll(model, feats[:l], st, size)
                    for i in range(len(tr)):
                        ps_p.append(pp[1:, i])
                        ps_g.append(torch.as_tensor(tr[i, 1:l], dtype=pos.dtype))
        if not main_p and not ps_p:
            continue
        if main_p:
            part = tracking_loss(torch.stack(main_p), torch.stack(main_g), ps_p, ps_g, cfg.loss)
        else:
            part = cfg.loss.alpha2 / len(ps_p) * sum(huber(p, g, cfg.loss.huber_delta) for p, g in zip(ps_p, ps_g))
        yield part


def finetune_tracker(model: PointTrackerNet, data: Sequence[tuple[Clip, TrainSample, dict]],
                     cfg: FinetuneConfig = FinetuneConfig()) -> tuple[PointTrackerNet, dict]:
    """Adapter fine-tuning. ``data`` holds (clip, sample, human labels by absolute frame)."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    apply_adapters(model, cfg.adapters)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    history = {"epoch_loss": [], "params": parameter_counts(model), "ranks": {}}
    t_start = time.perf_counter()
    model.train()
    for ep in range(cfg.epochs):
        total, n = 0.0, 0
        for i in rng.permutation(len(data)):
            clip, sample, human = data[i]
            for loss in sample_loss(model, clip, sample, human, cfg, rng):
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(params, 1.0)
                opt.step()
                total += loss.item()
                n += 1
        if cfg.adapters.mode == "adaptive_rank" and ep >= cfg.prune_after_epoch:
            history["ranks"] = prune_ranks(model, cfg.adapters)
        history["epoch_loss"].append(total / max(1, n))
        log.info("finetune epoch %d loss %.4f", ep, history["epoch_loss"][-1])
    history["train_time_s"] = time.perf_counter() - t_start
    return model.eval(), history


def train_config_json(cfg) -> dict:
    return asdict(cfg)
