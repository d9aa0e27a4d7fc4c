"""Training for the onset detector: confidence gate first, then the window head."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from typing import Sequence

import cv2
import numpy as np
import torch

from .onset import (FLOW_CH, FLOW_SCALE, RGB_CH, HSV_CH, ConfidenceNet, OnsetConfig, OnsetDetector,
                    PairCache, _as_tensor, decide_offline, gate_decisions, pair_features,
                    predict_windows, refs_from_decisions, temporal_loss, window_labels,
                    WindowPrediction)
from .video import Clip

log = logging.getLogger(__name__)

MOTION_THRESHOLD_PX = 2.0


@dataclass(frozen=True)
class OnsetTrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    weight_decay: float = 1e-4
    gate_epochs: int = 8
    gate_pairs_per_clip: int = 24
    max_drop: int = 60
    seed: int = 0
    time_budget_s: float | None = None


def _wash_out(image: np.ndarray, strength: float) -> np.ndarray:
    img = image.astype(np.float32)
    gray = img.mean(axis=2, keepdims=True)
    img = img * (1 - 0.5 * strength) + gray * 0.5 * strength
    img = img * (1 - 0.6 * strength) + np.array([205.0, 215.0, 225.0]) * 0.6 * strength
    img = cv2.GaussianBlur(img, (0, 0), 0.5 + 2.0 * strength)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _shift(image: np.ndarray, dx: float, dy: float) -> np.ndarray:
    M = np.array([[1, 0, dx], [0, 1, dy]], np.float64)
    return cv2.warpAffine(image, M, (image.shape[1], image.shape[0]), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_REFLECT)


def gate_training_set(clips: Sequence[tuple[Clip, int | None]], rng: np.random.Generator,
                      per_clip: int = 24) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pairs with colour/flow targets built from the onset label and augmentation.

    Colour target is 1 when the earlier frame already shows blood or was washed
    out; flow target is 1 when the pair's median motion exceeds 2 px, measured
    by the flow backend itself (jitter is simulated by shifting one frame).
    """
    raws, tc, tf = [], [], []
    for clip, onset in clips:
        T = len(clip)
        for _ in range(per_clip):
            if onset is not None and rng.random() < 0.4:
                k = int(rng.integers(onset, T - 1))
            else:
                hi = onset if onset is not None else T - 1
                k = int(rng.integers(0, max(1, hi)))
            prev, curr = clip[k].image, clip[k + 1].image
            color = float(onset is not None and k >= onset)
            u = rng.random()
            if u < 0.1:
                curr = prev
            elif u < 0.4:
                mag, ang = rng.uniform(0, 7), rng.uniform(0, 2 * np.pi)
                curr = _shift(curr, mag * np.cos(ang), mag * np.sin(ang))
            elif u < 0.55:
                prev = _wash_out(prev, rng.uniform(0.4, 1.0))
                color = 1.0
            raw = pair_features(prev, curr)
            motion = float(np.median(raw[RGB_CH + HSV_CH + 2].astype(np.float32))) * FLOW_SCALE
            raws.append(raw)
            tc.append(color)
            tf.append(float(motion > MOTION_THRESHOLD_PX))
    return np.stack(raws), np.array(tc, np.float32), np.array(tf, np.float32)


def train_gate(raw: np.ndarray, t_color: np.ndarray, t_flow: np.ndarray, epochs: int = 8,
               lr: float = 1e-3, seed: int = 0, batch: int = 64) -> ConfidenceNet:
    torch.manual_seed(seed)
    net = ConfidenceNet()
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    x = torch.as_tensor(raw.astype(np.float32))
    yc, yf = torch.as_tensor(t_color), torch.as_tensor(t_flow)
    bce = torch.nn.BCELoss()
    for ep in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for s in range(0, len(x), batch):
            idx = torch.as_tensor(order[s:s + batch])
            c, f = net(x[idx])
            loss = bce(c, yc[idx]) + bce(f, yf[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        log.info("gate epoch %d loss %.4f", ep, total / len(x))
    return net.eval()


class _Pairs:
    """Precomputed raw pair maps for one clip (images are released after construction)."""

    def __init__(self, raw: dict[tuple[int, int], np.ndarray]):
        self._raw = raw

    def raw(self, a: int, b: int) -> np.ndarray:
        return self._raw[(a, b)]


@dataclass
class _ClipData:
    pairs: _Pairs
    stored: np.ndarray
    onset: int | None
    T: int


def _needed_pairs(stored: np.ndarray, first: int, N: int) -> set[tuple[int, int]]:
    T = len(stored)
    refs = refs_from_decisions(stored, first)
    need = set()
    for t in range(first, T):
        need.add((t - 1 if t > first else t, t))
        if refs[t] is not None:
            need.add((refs[t], t))
    # fallback pairs for frames that precede the first keyframe
    for s in range(first, T - N + 1):
        for t in range(s, s + N):
            if refs[t] is None:
                need.add((s, t))
            else:
                break
    return need


def _prepare(clip: Clip, onset: int | None, gate: ConfidenceNet, cfg: OnsetConfig,
             offsets: Sequence[int]) -> _ClipData:
    images = clip.images()
    cache = PairCache(images)
    stored = gate_decisions(cache, len(images), gate, cfg)
    need = set()
    for o in set(offsets):
        need |= _needed_pairs(stored, o, cfg.window_N)
    raw = {p: cache.raw(*p) for p in sorted(need)}
    return _ClipData(_Pairs(raw), stored, onset, len(images))


def _clip_windows(data: _ClipData, first: int, N: int):
    starts = list(range(first, data.T - N + 1))
    refs = refs_from_decisions(data.stored, first)
    return starts, refs


def evaluate_prepared(head, data: Sequence[_ClipData], offsets: Sequence[int], cfg: OnsetConfig,
                      tolerance: int = 8) -> float:
    hits = 0
    with torch.no_grad():
        for d, o in zip(data, offsets):
            starts, refs = _clip_windows(d, o, cfg.window_N)
            theta, s = predict_windows(head, d.pairs, refs, starts, first=o)
            preds = [WindowPrediction(th, c, t - o) for t, th, c in zip(starts, theta.tolist(), s.tolist())]
            res = decide_offline(preds, cfg.window_N, cfg.conf_decision_threshold)
            gt = None if d.onset is None else d.onset - o
            if res.onset_frame is None or gt is None:
                hits += int(res.onset_frame is None and gt is None)
            else:
                hits += int(abs(res.onset_frame - gt) <= tolerance)
    return hits / max(1, len(data))


def train_onset(train: Sequence[tuple[Clip, int | None]], cfg: OnsetConfig = OnsetConfig(),
                tcfg: OnsetTrainConfig = OnsetTrainConfig(),
                val: Sequence[tuple[Clip, int | None]] = ()) -> tuple[OnsetDetector, dict]:
    """Train gate and window head. ``train`` holds (clip, onset frame) pairs.

    The window head sees each clip once per epoch with a fresh random prefix
    drop. When ``val`` is given, the epoch with the best held-out +-8 frame
    accuracy is kept.
    """
    t_start = time.perf_counter()
    rng = np.random.default_rng(tcfg.seed)
    torch.manual_seed(tcfg.seed)
    N = cfg.window_N

    raw, tc, tf = gate_training_set(train, rng, tcfg.gate_pairs_per_clip)
    gate = train_gate(raw, tc, tf, tcfg.gate_epochs, tcfg.lr, tcfg.seed)
    del raw

    offsets = rng.integers(0, tcfg.max_drop + 1, size=(tcfg.epochs, len(train)))
    offsets = np.minimum(offsets, np.array([len(c) - N for c, _ in train])[None, :])
    data = [_prepare(c, on, gate, cfg, offsets[:, i]) for i, (c, on) in enumerate(train)]
    val_off = [int(v) for v in rng.integers(0, tcfg.max_drop + 1, size=len(val))]
    val_off = [min(o, len(c) - N) for o, (c, _) in zip(val_off, val)]
    val_data = [_prepare(c, on, gate, cfg, [o]) for (c, on), o in zip(val, val_off)]
    log.info("features ready in %.1fs", time.perf_counter() - t_start)

    det = OnsetDetector(cfg)
    det.gate.load_state_dict(gate.state_dict())
    head = det.head
    opt = torch.optim.AdamW(head.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, tcfg.epochs * len(data)))
    history = {"epoch_loss": [], "val_acc": [], "train_time_s": 0.0}
    best = (-1.0, None)
    for ep in range(tcfg.epochs):
        head.train()
        total = 0.0
        for i in rng.permutation(len(data)):
            d, o = data[i], int(offsets[ep, i])
            starts, refs = _clip_windows(d, o, N)
            pos, th_gt = window_labels(starts, d.onset, N)
            theta, s = predict_windows(head, d.pairs, refs, starts, first=o)
            loss = temporal_loss(theta, s, torch.as_tensor(pos), torch.as_tensor(th_gt, dtype=theta.dtype), N)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(head.parameters(), 1.0)
            opt.step()
            sched.step()
            total += loss.item()
        head.eval()
        history["epoch_loss"].append(total / len(data))
        acc = evaluate_prepared(head, val_data, val_off, cfg) if val_data else float("nan")
        history["val_acc"].append(acc)
        shown = f" val@8 {acc:.3f}" if val_data else ""
        log.info("onset epoch %d loss %.3f%s (%.0fs)", ep, total / len(data), shown, time.perf_counter() - t_start)
        if val_data and acc > best[0]:
            best = (acc, {k: v.clone() for k, v in head.state_dict().items()})
        if tcfg.time_budget_s and time.perf_counter() - t_start > tcfg.time_budget_s:
            log.warning("time budget reached after epoch %d", ep)
            break
    if best[1] is not None:
        head.load_state_dict(best[1])
    history["train_time_s"] = time.perf_counter() - t_start
    return det.eval(), history


def train_config_json(tcfg: OnsetTrainConfig) -> dict:
    return asdict(tcfg)
