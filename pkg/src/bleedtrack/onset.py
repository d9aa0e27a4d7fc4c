"""Bleeding-onset localization.

Pipeline per clip:

* every adjacent frame pair is summarized as stride-8 difference maps in three
  domains (RGB, HSV, flow);
* a small confidence net scores each pair; the previous frame enters the
  keyframe memory only when both scores are low (a clean, steady view);
* each frame becomes a token built from two fused difference maps, one
  against its predecessor and one against the most recent keyframe;
* a transformer over a window of N tokens predicts a relative onset position
  ``theta`` and a window confidence ``s_conf``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .flow import block_flow
from .imaging import hsv_difference, pool, rgb_to_hsv
from .video import Clip, Frame

FEATURE_STRIDE = 8
RGB_CH, HSV_CH, FLOW_CH, APP_CH = 6, 6, 3, 6
PAIR_CH = RGB_CH + HSV_CH + FLOW_CH + APP_CH
FLOW_SCALE = 4.0


@dataclass(frozen=True)
class OnsetConfig:
    window_N: int = 60
    alpha: float = 0.5
    gamma: float = 0.5
    memory_capacity: int = 8
    conf_decision_threshold: float = 0.5
    channels: int = 32
    d_model: int = 64
    layers: int = 4
    heads: int = 8

    def __post_init__(self):
        if not (0 < self.alpha < 1 and 0 < self.gamma < 1):
            raise ValueError("alpha and gamma must lie in (0, 1)")
        if self.window_N < 2:
            raise ValueError("window_N must be at least 2")
        if self.memory_capacity < 1:
            raise ValueError("memory_capacity must be at least 1")


# --------------------------------------------------------------------------- difference features


def frame_appearance(image: np.ndarray, stride: int = FEATURE_STRIDE) -> np.ndarray:
    """Pooled HSV (mean and max), channels first."""
    hsv = rgb_to_hsv(image)
    return np.concatenate([pool(hsv, stride, "mean"), pool(hsv, stride, "max")], axis=-1).transpose(2, 0, 1)


def pair_features(prev: np.ndarray, curr: np.ndarray, stride: int = FEATURE_STRIDE) -> np.ndarray:
    """Raw stride-``stride`` maps for a frame pair, shape (PAIR_CH, H/s, W/s), float16.

    Channel layout: |dRGB| mean/max, |dHSV| mean/max (circular hue), flow
    dx/dy/magnitude, then appearance of ``prev``.
    """
    if prev.shape != curr.shape:
        raise ValueError(f"frame resolution mismatch: {prev.shape} vs {curr.shape}")
    a, b = prev.astype(np.float32) / 255.0, curr.astype(np.float32) / 255.0
    d_rgb = np.abs(b - a)
    d_hsv = hsv_difference(rgb_to_hsv(prev), rgb_to_hsv(curr))
    # flow at half resolution is plenty for a stride-8 summary
    small = lambda im: im[::2, ::2] if min(im.shape[:2]) >= 64 else im
    f = block_flow(small(prev), small(curr), levels=2)
    if f.shape[:2] != prev.shape[:2]:
        f = 2.0 * np.repeat(np.repeat(f, 2, 0), 2, 1)[: prev.shape[0], : prev.shape[1]]
    mag = np.linalg.norm(f, axis=-1, keepdims=True)
    flow = np.concatenate([f, mag], -1) / FLOW_SCALE
    s = stride
    maps = [
        pool(d_rgb, s, "mean"), pool(d_rgb, s, "max"),
        pool(d_hsv, s, "mean"), pool(d_hsv, s, "max"),
        pool(flow, s, "mean"),
    ]
    out = np.concatenate(maps, -1).transpose(2, 0, 1)
    return np.concatenate([out, frame_appearance(prev, s)], 0).astype(np.float16)


def split_domains(raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """(B, PAIR_CH, h, w) -> rgb, hsv, flow, appearance."""
    i = np.cumsum([0, RGB_CH, HSV_CH, FLOW_CH, APP_CH])
    return tuple(raw[:, i[k]:i[k + 1]] for k in range(4))


# --------------------------------------------------------------------------- confidence gate


def _branch(c_in: int, width: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, width, 3, padding=1), nn.ReLU(),
        nn.Conv2d(width, width, 3, padding=1, stride=2), nn.ReLU(),
        nn.Conv2d(width, width, 3, padding=1), nn.ReLU(),
    )


class ConfidenceNet(nn.Module):
    """Colour and flow confidence for a frame pair; high means "not a clean view"."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.color = _branch(RGB_CH + HSV_CH + APP_CH, width)
        self.flow = _branch(FLOW_CH, width)
        self.color_fc = nn.Linear(2 * width, 1)
        self.flow_fc = nn.Linear(2 * width, 1)

    def zero_heads(self) -> None:
        for fc in (self.color_fc, self.flow_fc):
            nn.init.zeros_(fc.weight)
            nn.init.zeros_(fc.bias)

    @staticmethod
    def _pool(x: torch.Tensor) -> torch.Tensor:
        return torch.cat([x.mean((2, 3)), x.amax((2, 3))], 1)

    def forward(self, raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        rgb, hsv, flow, app = split_domains(raw)
        c = self.color_fc(self._pool(self.color(torch.cat([rgb, hsv, app], 1))))
        f = self.flow_fc(self._pool(self.flow(flow)))
        return torch.sigmoid(c).squeeze(1), torch.sigmoid(f).squeeze(1)


def _as_tensor(raw: np.ndarray | Sequence[np.ndarray], like: nn.Module) -> torch.Tensor:
    p = next(like.parameters())
    arr = np.stack(raw) if not isinstance(raw, np.ndarray) or raw.ndim == 3 else raw
    if arr.ndim == 3:
        arr = arr[None]
    return torch.as_tensor(arr.astype(np.float32), dtype=p.dtype, device=p.device)


def interframe_confidences(prev: Frame, curr: Frame, net: ConfidenceNet) -> tuple[float, float]:
    """(c_color, c_flow) in [0, 1] for one frame pair."""
    if prev.image.shape != curr.image.shape:
        raise ValueError("frame resolution mismatch")
    with torch.no_grad():
        c, f = net(_as_tensor(pair_features(prev.image, curr.image), net))
    return float(c[0]), float(f[0])


# --------------------------------------------------------------------------- keyframe memory


def keyframe_gate(c_color: float, c_flow: float, alpha: float = 0.5, gamma: float = 0.5) -> bool:
    """Store the previous frame iff both confidences fall below their thresholds."""
    return c_color < alpha and c_flow < gamma


@dataclass(frozen=True)
class MemoryStore:
    capacity: int = 8
    recent: Frame | None = None
    keyframes: tuple[Frame, ...] = ()

    def __post_init__(self):
        if len(self.keyframes) > self.capacity:
            raise ValueError("memory over capacity")

    def __len__(self) -> int:
        return len(self.keyframes)

    @property
    def latest(self) -> Frame | None:
        return self.keyframes[-1] if self.keyframes else None


Gate = Callable[[Frame, Frame], tuple[float, float]]


def update_memory(mem: MemoryStore, prev: Frame, curr: Frame, cfg: OnsetConfig,
                  gate: Gate | ConfidenceNet) -> MemoryStore:
    """One memory step for the pair ``(prev, curr)``; returns the new store.

    ``gate`` is either a trained ``ConfidenceNet`` or any callable returning
    ``(c_color, c_flow)`` for the pair.
    """
    c_color, c_flow = (interframe_confidences(prev, curr, gate) if isinstance(gate, nn.Module)
                       else gate(prev, curr))
    keys = mem.keyframes
    if keyframe_gate(c_color, c_flow, cfg.alpha, cfg.gamma):
        keys = (keys + (prev,))[-cfg.memory_capacity:]
    return MemoryStore(cfg.memory_capacity, prev, keys)


# --------------------------------------------------------------------------- fusion and window head


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        self.fc = nn.Sequential(nn.Linear(channels, channels // reduction), nn.ReLU(),
                                nn.Linear(channels // reduction, channels), nn.Sigmoid())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.fc(x.mean((2, 3)))[:, :, None, None]


class MDGFusion(nn.Module):
    """Channel attention over the three stacked domains, then three gated conv branches."""

    def __init__(self, channels: int = 32):
        super().__init__()
        c3 = 3 * channels
        self.attention = ChannelAttention(c3)
        self.branches = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c3, channels, 1), nn.ReLU(),
                          nn.Conv2d(channels, channels, 3, padding=1))
            for _ in range(3)
        )
        self.gate = nn.Linear(c3, 3)

    def gates(self, fused: torch.Tensor) -> torch.Tensor:
        g = torch.sigmoid(self.gate(fused.mean((2, 3))))
        return g / g.sum(1, keepdim=True)

    def forward(self, d_rgb: torch.Tensor, d_hsv: torch.Tensor, d_flow: torch.Tensor,
                gates: torch.Tensor | None = None) -> torch.Tensor:
        if not (d_rgb.shape == d_hsv.shape == d_flow.shape):
            raise ValueError(f"domain shapes differ: {tuple(d_rgb.shape)}, {tuple(d_hsv.shape)}, "
                             f"{tuple(d_flow.shape)}")
        fused = self.attention(torch.cat([d_rgb, d_hsv, d_flow], 1))
        g = self.gates(fused) if gates is None else gates.to(fused).expand(fused.shape[0], 3)
        out = torch.stack([b(fused) for b in self.branches], 1)       # B, 3, C, h, w
        return (g[:, :, None, None, None] * out).sum(1)


def mdg_fuse(d_rgb: torch.Tensor, d_hsv: torch.Tensor, d_flow: torch.Tensor, params: MDGFusion,
             gates: torch.Tensor | None = None) -> torch.Tensor:
    """Functional entry point; accepts C x h x w maps or batched B x C x h x w."""
    single = d_rgb.dim() == 3
    if single:
        d_rgb, d_hsv, d_flow = d_rgb[None], d_hsv[None], d_flow[None]
    out = params(d_rgb, d_hsv, d_flow, gates)
    return out[0] if single else out


def _encoder(c_in: int, c: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU(), nn.Conv2d(c, c, 3, padding=1))


class WindowTransformer(nn.Module):
    """Tokens of one window plus a CLS token -> transformer encoder -> one sigmoid output."""

    def __init__(self, cfg: OnsetConfig, in_dim: int):
        super().__init__()
        d = cfg.d_model
        self.token = nn.Sequential(nn.Linear(in_dim, d), nn.ReLU(), nn.Linear(d, d))
        self.cls = nn.Parameter(torch.zeros(1, 1, d))
        self.pos = nn.Parameter(0.02 * torch.randn(1, cfg.window_N + 1, d))
        layer = nn.TransformerEncoderLayer(d, cfg.heads, dim_feedforward=2 * d, dropout=0.0,
                                           batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, cfg.layers, enable_nested_tensor=False)
        self.head = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, 1))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        tok = self.token(tokens)
        x = torch.cat([self.cls.expand(tok.shape[0], -1, -1), tok], 1) + self.pos[:, : tok.shape[1] + 1]
        return torch.sigmoid(self.head(self.encoder(x)[:, 0]))[:, 0]


class WindowHead(nn.Module):
    """Pair maps -> per-frame tokens -> transformers over the window -> (theta, s_conf).

    Confidence and position come from separate transformer towers. The
    position tower reads detached pair vectors, so the frame-scale squared
    error cannot swamp the cross-entropy in shared weights: every parameter
    is driven by exactly one loss term.
    """

    def __init__(self, cfg: OnsetConfig = OnsetConfig()):
        super().__init__()
        c = cfg.channels
        self.cfg = cfg
        self.enc_rgb = _encoder(RGB_CH, c)
        self.enc_hsv = _encoder(HSV_CH, c)
        self.enc_flow = _encoder(FLOW_CH, c)
        self.mdg = MDGFusion(c)
        self.conf = WindowTransformer(cfg, 4 * c)
        self.loc = WindowTransformer(cfg, 4 * c)

    def pair_vectors(self, raw: torch.Tensor) -> torch.Tensor:
        """(P, PAIR_CH, h, w) -> (P, 2C) pooled fused difference features."""
        rgb, hsv, flow, _ = split_domains(raw)
        fused = self.mdg(self.enc_rgb(rgb), self.enc_hsv(hsv), self.enc_flow(flow))
        return torch.cat([fused.mean((2, 3)), fused.amax((2, 3))], 1)

    def forward_tokens(self, adj: torch.Tensor, ref: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """adj, ref: (B, N, 2C) pair vectors -> theta, s_conf each (B,)."""
        tokens = torch.cat([adj, ref], -1)
        return self.loc(tokens.detach()), self.conf(tokens)


@dataclass(frozen=True)
class WindowPrediction:
    theta: float
    s_conf: float
    window_start: int


@dataclass(frozen=True)
class OnsetResult:
    onset_frame: int | None
    contributing_window: int | None
    predictions: tuple[WindowPrediction, ...] = field(default=(), repr=False)


# --------------------------------------------------------------------------- decision rules


def window_onset(pred: WindowPrediction, N: int) -> int:
    return pred.window_start + int(math.floor(pred.theta * N))


def decide_offline(preds: Iterable[WindowPrediction], N: int, threshold: float = 0.5) -> OnsetResult:
    """Minimum of ``t + floor(theta * N)`` over windows with ``s_conf > threshold``."""
    preds = tuple(preds)
    best = None
    for p in preds:
        if p.s_conf > threshold:
            cand = window_onset(p, N)
            if best is None or cand < best[0]:
                best = (cand, p.window_start)
    return OnsetResult(*(best if best else (None, None)), predictions=preds)


def decide_streaming(preds: Iterable[WindowPrediction], N: int, threshold: float = 0.5) -> OnsetResult:
    """First window (in stream order) with ``s_conf > threshold`` wins."""
    seen = []
    for p in preds:
        seen.append(p)
        if p.s_conf > threshold:
            return OnsetResult(window_onset(p, N), p.window_start, tuple(seen))
    return OnsetResult(None, None, tuple(seen))


# --------------------------------------------------------------------------- clip-level inference


class OnsetDetector(nn.Module):
    """Gate and window head bundled with the config they were trained under."""

    def __init__(self, cfg: OnsetConfig = OnsetConfig()):
        super().__init__()
        self.cfg = cfg
        self.gate = ConfidenceNet()
        self.head = WindowHead(cfg)


class PairCache:
    """Lazily computed raw pair maps for one clip, keyed by (a, b) frame index."""

    def __init__(self, images: np.ndarray):
        self.images = images
        self._raw: dict[tuple[int, int], np.ndarray] = {}

    def raw(self, a: int, b: int) -> np.ndarray:
        key = (a, b)
        if key not in self._raw:
            self._raw[key] = pair_features(self.images[a], self.images[b])
        return self._raw[key]


def gate_decisions(cache: PairCache, T: int, gate: ConfidenceNet, cfg: OnsetConfig,
                   batch: int = 64) -> np.ndarray:
    """``stored[k]`` is the gate verdict on the pair (k, k+1)."""
    stored = np.zeros(T, bool)
    with torch.no_grad():
        for s in range(0, T - 1, batch):
            ks = range(s, min(s + batch, T - 1))
            c, f = gate(_as_tensor([cache.raw(k, k + 1) for k in ks], gate))
            for k, cc, ff in zip(ks, c.tolist(), f.tolist()):
                stored[k] = keyframe_gate(cc, ff, cfg.alpha, cfg.gamma)
    return stored


def refs_from_decisions(stored: np.ndarray, first: int = 0) -> list[int | None]:
    """Most recent keyframe visible when frame t is tokenized, for a clip starting at ``first``."""
    refs: list[int | None] = [None] * len(stored)
    last = None
    for t in range(first, len(stored)):
        if t > first and stored[t - 1]:
            last = t - 1
        refs[t] = last
    return refs


def memory_trace(images: np.ndarray, cache: PairCache, gate: ConfidenceNet,
                 cfg: OnsetConfig) -> list[int | None]:
    """Most recent keyframe index visible at each frame (None while memory is empty).

    Equivalent to folding ``update_memory`` over the clip and reading
    ``latest``; batched because a gate verdict does not depend on the memory.
    """
    return refs_from_decisions(gate_decisions(cache, len(images), gate, cfg))


def window_pairs(start: int, N: int, refs: Sequence[int | None],
                 first: int = 0) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Adjacent and reference pairs for the window starting at ``start``.

    ``first`` is the earliest frame that exists (non-zero when a prefix was
    dropped); that frame is paired with itself.
    """
    adj = [((t - 1 if t > first else t), t) for t in range(start, start + N)]
    ref = [((refs[t] if refs[t] is not None else start), t) for t in range(start, start + N)]
    return adj, ref


def predict_windows(head: WindowHead, cache: PairCache, refs: Sequence[int | None],
                    starts: Sequence[int], first: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched window predictions; differentiable w.r.t. ``head``."""
    N = head.cfg.window_N
    plan = [window_pairs(s, N, refs, first) for s in starts]
    uniq = sorted({p for adj, ref in plan for p in adj + ref})
    index = {p: i for i, p in enumerate(uniq)}
    vec = head.pair_vectors(_as_tensor([cache.raw(*p) for p in uniq], head))
    adj_idx = torch.tensor([[index[p] for p in adj] for adj, _ in plan])
    ref_idx = torch.tensor([[index[p] for p in ref] for _, ref in plan])
    return head.forward_tokens(vec[adj_idx], vec[ref_idx])


def predict_window(frames: Sequence[Frame], mem: MemoryStore, head: WindowHead,
                   gate: Gate | ConfidenceNet | None = None,
                   cfg: OnsetConfig | None = None) -> WindowPrediction:
    """Score one window of exactly N frames starting from memory state ``mem``.

    With a ``gate`` the memory is advanced frame by frame inside the window;
    without one it is held fixed.
    """
    cfg = cfg or head.cfg
    N = cfg.window_N
    if len(frames) != N:
        raise ValueError(f"window needs {N} frames, got {len(frames)}")
    images = np.stack([f.image for f in frames])
    cache = PairCache(images)
    first = frames[0]
    prev_raw = [pair_features(mem.recent.image, first.image) if mem.recent is not None
                else cache.raw(0, 0)]
    refs_raw = []
    for i, fr in enumerate(frames):
        before = frames[i - 1] if i >= 1 else mem.recent
        if gate is not None and before is not None:
            mem = update_memory(mem, before, fr, cfg, gate)
        key = mem.latest
        refs_raw.append(pair_features(key.image, fr.image) if key is not None else cache.raw(0, i))
        if i >= 1:
            prev_raw.append(cache.raw(i - 1, i))
    with torch.no_grad():
        adj = head.pair_vectors(_as_tensor(prev_raw, head))[None]
        ref = head.pair_vectors(_as_tensor(refs_raw, head))[None]
        theta, s = head.forward_tokens(adj, ref)
    return WindowPrediction(float(theta[0]), float(s[0]), frames[0].index)


def locate_onset(clip: Clip, cfg: OnsetConfig, detector: OnsetDetector, mode: str = "offline",
                 batch: int = 32) -> OnsetResult:
    """Onset frame of ``clip`` with the global-minimum rule (offline) or first-valid rule (streaming)."""
    N = cfg.window_N
    if len(clip) < N:
        raise ValueError(f"clip of length {len(clip)} is shorter than the window ({N})")
    if mode not in ("offline", "streaming"):
        raise ValueError(f"unknown mode {mode!r}")
    images = clip.images()
    cache = PairCache(images)
    refs = memory_trace(images, cache, detector.gate, cfg)
    starts = list(range(len(clip) - N + 1))
    preds: list[WindowPrediction] = []
    step = batch if mode == "offline" else 1
    with torch.no_grad():
        for s in range(0, len(starts), step):
            chunk = starts[s:s + step]
            theta, conf = predict_windows(detector.head, cache, refs, chunk)
            for t, th, c in zip(chunk, theta.tolist(), conf.tolist()):
                preds.append(WindowPrediction(th, c, t))
            if mode == "streaming" and preds[-1].s_conf > cfg.conf_decision_threshold:
                break
    rule = decide_offline if mode == "offline" else decide_streaming
    return rule(preds, N, cfg.conf_decision_threshold)


# --------------------------------------------------------------------------- loss


EPS = 1e-7


def window_labels(starts: Sequence[int], onset: int | None, N: int) -> tuple[np.ndarray, np.ndarray]:
    """Positive iff the onset lies in ``[t, t + N)``; theta target at the centre of the onset's bin."""
    pos = np.array([onset is not None and t <= onset < t + N for t in starts], bool)
    theta = np.array([(onset - t + 0.5) / N if p else 0.0 for t, p in zip(starts, pos)])
    return pos, theta


def temporal_loss(theta: torch.Tensor, s_conf: torch.Tensor, positive: torch.Tensor,
                  theta_gt: torch.Tensor, N: int) -> torch.Tensor:
    """Mean BCE on negatives plus (BCE + squared frame error) on positives."""
    s = s_conf.clamp(EPS, 1 - EPS)
    positive = positive.bool()
    zero = s.sum() * 0
    neg = -torch.log(1 - s[~positive]).mean() if (~positive).any() else zero
    if positive.any():
        pos = -torch.log(s[positive]).mean() + ((N * theta[positive] - N * theta_gt[positive]) ** 2).mean()
    else:
        pos = zero
    return neg + pos


def temporal_loss_from_predictions(preds: Sequence[WindowPrediction], labels: Sequence,
                                   N: int) -> float:
    """Scalar loss for a list of predictions; each label is ``None`` (negative) or ``theta_gt``."""
    if len(preds) != len(labels):
        raise ValueError("one label per prediction")
    pos = torch.tensor([lab is not None for lab in labels])
    tgt = torch.tensor([0.0 if lab is None else float(lab) for lab in labels], dtype=torch.float64)
    th = torch.tensor([p.theta for p in preds], dtype=torch.float64)
    s = torch.tensor([p.s_conf for p in preds], dtype=torch.float64)
    return float(temporal_loss(th, s, pos, tgt, N))
