"""Query-based point tracker.

Each frame is encoded by a small stride-4 convolutional backbone. Red-mask
features are concatenated to the visual features and the result serves as
Key and Value for a two-layer query decoder. The decoder attends over a local
grid of samples around the previous point. The response between the decoded
query and each sample is soft-argmaxed into the new point, and a small head
turns the decoded query and response statistics into a confidence.

The track's memory is a running mean of descriptors sampled at its past
predictions. A refresh clears it and re-samples the query at the current
prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .imaging import red_score
from .video import Clip, Frame

STRIDE = 4


@dataclass(frozen=True)
class TrackerConfig:
    dim: int = 64
    red_channels: int = 8
    heads: int = 4
    layers: int = 2
    grid_radius: int = 7          # samples per side = 2 * radius + 1
    grid_step: float = 2.0        # pixels between samples
    temperature: float = 1.0


@dataclass(frozen=True)
class RefreshPolicy:
    interval: int = 60
    enabled: bool = True

    def __post_init__(self):
        if self.interval <= 0:
            raise ValueError("refresh interval must be positive")


@dataclass(frozen=True)
class TrackState:
    query_feature: torch.Tensor       # (D,) descriptor sampled at the (re)initialization point
    last_point: tuple[float, float]
    frames_since_refresh: int
    memory: tuple[torch.Tensor, int]  # running sum of descriptors and their count
    frame_size: tuple[int, int]       # (W, H)

    @property
    def query(self) -> torch.Tensor:
        total, n = self.memory
        return self.query_feature if n == 0 else 0.5 * (self.query_feature + total / n)


class Attention(nn.Module):
    """Multi-head cross-attention with separate projection layers (so adapters can wrap them)."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, query: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        """query (B, 1, D), kv (B, L, D) -> (B, 1, D)."""
        B, L, D = kv.shape
        h = self.heads
        q = self.q(query).reshape(B, 1, h, D // h).transpose(1, 2)
        k = self.k(kv).reshape(B, L, h, D // h).transpose(1, 2)
        v = self.v(kv).reshape(B, L, h, D // h).transpose(1, 2)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(D // h), dim=-1)
        return self.o((w @ v).transpose(1, 2).reshape(B, 1, D))


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, 2 * dim)

    def forward(self, q: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        q = q + self.attn(self.norm1(q), kv)
        return q + self.mlp(self.norm2(q))


def red_attention_augment(F_vision: torch.Tensor, F_red: torch.Tensor) -> torch.Tensor:
    """Concatenate red-mask features to visual features along channels; Key/Value input of the decoder."""
    if F_vision.dim() != 4 or F_red.dim() != 4:
        raise ValueError("expected (B, C, h, w) feature maps")
    if F_vision.shape[0] != F_red.shape[0] or F_vision.shape[-2:] != F_red.shape[-2:]:
        raise ValueError(f"misaligned features: {tuple(F_vision.shape)} vs {tuple(F_red.shape)}")
    return torch.cat([F_vision, F_red], 1)


class PointTrackerNet(nn.Module):
    def __init__(self, cfg: TrackerConfig = TrackerConfig()):
        super().__init__()
        self.cfg = cfg
        D, R = cfg.dim, cfg.red_channels
        self.backbone = nn.Sequential(
            nn.Conv2d(3, 32, 5, stride=2, padding=2), nn.ReLU(),
            nn.Conv2d(32, D, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(D, D, 3, padding=1), nn.ReLU(),
            nn.Conv2d(D, D, 3, padding=1),
        )
        self.red = nn.Sequential(nn.Conv2d(1, R, 3, padding=1), nn.ReLU())
        self.embed = nn.Linear(D + R, D)
        self.offset = nn.Linear(2, D)
        self.layers = nn.ModuleList(DecoderLayer(D, cfg.heads) for _ in range(cfg.layers))
        self.to_key = nn.Linear(D, D)
        self.conf = nn.Sequential(nn.Linear(D + 2, 32), nn.ReLU(), nn.Linear(32, 1))
        k = torch.arange(-cfg.grid_radius, cfg.grid_radius + 1, dtype=torch.float32)
        gy, gx = torch.meshgrid(k, k, indexing="ij")
        self.register_buffer("grid", torch.stack([gx, gy], -1).reshape(-1, 2) * cfg.grid_step, persistent=False)

    # -- features

    def prepare(self, images: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        dtype = self.offset.weight.dtype
        x = torch.as_tensor(images.transpose(0, 3, 1, 2).astype(np.float32) / 255.0 - 0.5, dtype=dtype)
        red = torch.as_tensor(np.stack([red_score(im) for im in images])[:, None], dtype=dtype)
        return x, red

    def features(self, x: torch.Tensor, red: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) image and (B, 1, H, W) red mask -> (B, D + R, H/4, W/4) Key/Value features."""
        F_vis = self.backbone(x)
        F_red = self.red(F.avg_pool2d(red, STRIDE))
        return red_attention_augment(F_vis, F_red)

    def encode(self, images: np.ndarray) -> torch.Tensor:
        return self.features(*self.prepare(images))

    def sample(self, feats: torch.Tensor, points: torch.Tensor, frame_size: tuple[int, int]) -> torch.Tensor:
        """Bilinear feature lookup at pixel positions. points (B, L, 2) -> (B, L, C)."""
        W, H = frame_size
        h, w = feats.shape[-2:]
        fx = (points[..., 0] + 0.5) / STRIDE - 0.5
        fy = (points[..., 1] + 0.5) / STRIDE - 0.5
        grid = torch.stack([(fx + 0.5) / w * 2 - 1, (fy + 0.5) / h * 2 - 1], -1)
        out = F.grid_sample(feats, grid[:, :, None], mode="bilinear", padding_mode="border", align_corners=False)
        return out[..., 0].transpose(1, 2)

    def describe(self, feats: torch.Tensor, points: torch.Tensor, frame_size: tuple[int, int]) -> torch.Tensor:
        """Query descriptors at ``points`` (B, 2) -> (B, D)."""
        return self.embed(self.sample(feats, points[:, None], frame_size))[:, 0]

    # -- decoding

    def support(self, centers: torch.Tensor, frame_size: tuple[int, int]) -> torch.Tensor:
        """Sample positions around each centre, clamped into the frame. (B, 2) -> (B, L, 2)."""
        W, H = frame_size
        pts = centers[:, None] + self.grid.to(centers.dtype)
        return torch.stack([pts[..., 0].clamp(0, W - 1), pts[..., 1].clamp(0, H - 1)], -1)

    def decode(self, feats: torch.Tensor, centers: torch.Tensor, query: torch.Tensor,
               frame_size: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
        """One tracking step given encoded features. Returns points (B, 2) and confidence (B,)."""
        pos = self.support(centers, frame_size)
        rel = (pos - centers[:, None]) / (self.cfg.grid_radius * self.cfg.grid_step)
        kv = self.embed(self.sample(feats, pos, frame_size)) + self.offset(rel)
        q = query[:, None]
        for layer in self.layers:
            q = layer(q, kv)
        logits = (self.to_key(kv) @ q.transpose(1, 2))[..., 0] / math.sqrt(self.cfg.dim)
        w = torch.softmax(logits / self.cfg.temperature, dim=1)
        points = (w[..., None] * pos).sum(1)
        peak = logits.amax(1, keepdim=True)
        spread = torch.logsumexp(logits, 1, keepdim=True) - peak
        conf = torch.sigmoid(self.conf(torch.cat([q[:, 0], peak, spread], 1)))[:, 0]
        return points, conf


# --------------------------------------------------------------------------- single-track API


def _frame_size(frame: Frame | np.ndarray) -> tuple[int, int]:
    image = frame.image if isinstance(frame, Frame) else frame
    return image.shape[1], image.shape[0]


def init_track(frame: Frame | np.ndarray, point, model: PointTrackerNet) -> TrackState:
    image = frame.image if isinstance(frame, Frame) else frame
    W, H = _frame_size(image)
    x, y = float(point[0]), float(point[1])
    if not (0 <= x <= W - 1 and 0 <= y <= H - 1):
        raise ValueError(f"init point ({x}, {y}) outside a {W}x{H} frame")
    with torch.no_grad():
        feats = model.encode(image)
        q = model.describe(feats, torch.tensor([[x, y]], dtype=feats.dtype), (W, H))[0]
    return TrackState(q, (x, y), 0, (torch.zeros_like(q), 0), (W, H))


def step(state: TrackState, frame: Frame | np.ndarray, model: PointTrackerNet,
         policy: RefreshPolicy | None = None) -> tuple[tuple[float, float], float, TrackState]:
    """Track one frame. With an enabled policy, the state is refreshed once the interval is reached."""
    image = frame.image if isinstance(frame, Frame) else frame
    with torch.no_grad():
        feats = model.encode(image)
        centre = torch.tensor([state.last_point], dtype=feats.dtype)
        pts, conf = model.decode(feats, centre, state.query[None], state.frame_size)
        desc = model.describe(feats, pts, state.frame_size)[0]
    point = (float(pts[0, 0]), float(pts[0, 1]))
    total, n = state.memory
    new = replace(state, last_point=point, frames_since_refresh=state.frames_since_refresh + 1,
                  memory=(total + desc, n + 1))
    if policy is not None and policy.enabled and new.frames_since_refresh >= policy.interval:
        new = TrackState(desc, point, 0, (torch.zeros_like(desc), 0), state.frame_size)
    return point, float(conf[0]), new


def track_clip(clip: Clip, init: tuple[int, tuple[float, float]], model: PointTrackerNet,
               policy: RefreshPolicy = RefreshPolicy()) -> list[tuple[tuple[float, float], float]]:
    """Per-frame (point, confidence) from the init frame to the clip end; the init frame echoes the point."""
    t0, point = init
    if not 0 <= t0 < len(clip):
        raise ValueError(f"init frame {t0} outside the clip")
    state = init_track(clip[t0], point, model)
    out = [((float(point[0]), float(point[1])), 1.0)]
    for t in range(t0 + 1, len(clip)):
        p, c, state = step(state, clip[t], model, policy)
        out.append((p, c))
    return out


# --------------------------------------------------------------------------- batched tracking


@dataclass
class Carry:
    """Batched tracker state between unroll calls."""

    query: torch.Tensor
    total: torch.Tensor
    count: int
    since: int
    centre: torch.Tensor

    def detach(self) -> "Carry":
        return Carry(self.query.detach(), self.total.detach(), self.count, self.since, self.centre.detach())


def start_carry(model: PointTrackerNet, feats0: torch.Tensor, start: torch.Tensor,
                frame_size: tuple[int, int]) -> Carry:
    n = start.shape[0]
    f = feats0.expand(n, -1, -1, -1) if feats0.shape[0] == 1 else feats0
    q0 = model.describe(f, start, frame_size)
    return Carry(q0, torch.zeros_like(q0), 0, 0, start.detach())


def unroll(model: PointTrackerNet, feats, start: torch.Tensor | None, frame_size: tuple[int, int],
           refresh: RefreshPolicy | None = None, carry: Carry | None = None,
           return_carry: bool = False):
    """Track points through encoded frames; feats[t] is (1 or n, C, h, w).

    Without ``carry``, feats[0] is the init frame and ``start`` (n, 2) the init
    points; the output then begins with ``start``. With ``carry``, every frame
    in ``feats`` is a new frame. Centres are detached between steps; gradients
    flow through each step's decoding and the initial query.
    Returns positions (L, n, 2) and confidence (L, n), plus the carry on request.
    """
    if carry is None:
        carry = start_carry(model, feats[0], start, frame_size)
        pts, confs = [start], [torch.ones(start.shape[0], dtype=start.dtype)]
        frames = feats[1:]
    else:
        pts, confs, frames = [], [], feats
    n = carry.centre.shape[0]
    q0, total, count, since, centre = carry.query, carry.total, carry.count, carry.since, carry.centre
    for f in frames:
        f = f.expand(n, -1, -1, -1) if f.shape[0] == 1 else f
        q = q0 if count == 0 else 0.5 * (q0 + total / count)
        p, c = model.decode(f, centre, q, frame_size)
        pts.append(p)
        confs.append(c)
        centre = p.detach()
        desc = model.describe(f, centre, frame_size).detach()
        total, count, since = total + desc, count + 1, since + 1
        if refresh is not None and refresh.enabled and since >= refresh.interval:
            q0, total, count, since = desc, torch.zeros_like(desc), 0, 0
    out = (torch.stack(pts), torch.stack(confs))
    return (*out, Carry(q0, total, count, since, centre)) if return_carry else out


def track_points(model: PointTrackerNet, images: np.ndarray, start: np.ndarray,
                 refresh: RefreshPolicy | None = None, batch_frames: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Inference helper: (L, H, W, 3) frames and (n, 2) start points -> positions (L, n, 2), confidence (L, n)."""
    images = np.asarray(images)
    size = (images.shape[2], images.shape[1])
    with torch.no_grad():
        feats = []
        for s in range(0, len(images), batch_frames):
            enc = model.encode(images[s:s + batch_frames])
            feats.extend(enc[i:i + 1] for i in range(len(enc)))
        start_t = torch.as_tensor(np.asarray(start, float).reshape(-1, 2), dtype=feats[0].dtype)
        pos, conf = unroll(model, feats, start_t, size, refresh)
    return pos.numpy().astype(float), conf.numpy().astype(float)
