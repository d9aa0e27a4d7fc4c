"""Single-frame bleeding-source localization.

The detector works on a downsampled copy of the frame (64x48 by default):

* ``red_mask`` is the fixed red prior;
* ``HeatMapHead`` predicts a dense source heat map;
* ``SpatialEncoder`` produces stride-8 appearance features;
* ``MultiScaleFusion`` runs attention at four scales with the heat map as
  Query, the red mask as Key and the encoder features as Value. The readout at
  each key location is the attention it receives in excess of the uniform
  share, weighted by a saliency of its value. Scales are upsampled, summed and
  normalized by the peak.

The source location is the argmax of the fused map, resampled to frame size.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.checkpoint import checkpoint

from .flow import FlowFn, block_flow, sample_flow
from .imaging import red_score
from .video import AnnotatedPoint, Clip, Frame

log = logging.getLogger(__name__)

WORK_SIZE = (64, 48)   # (width, height) the detector runs at
SCALES = (1, 2, 4, 8)


@dataclass(frozen=True)
class SpatialLossConfig:
    lambda1: float = 0.5
    lambda2: float = 0.5
    delta: float = 1.0
    gaussian_sigma: float | None = None   # None -> 2% of the frame diagonal
    huber_norm: str = "per_axis_sum"

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.delta) <= 0:
            raise ValueError("loss weights must be positive")
        if self.gaussian_sigma is not None and self.gaussian_sigma <= 0:
            raise ValueError("gaussian_sigma must be positive")

    def sigma_for(self, width: int, height: int) -> float:
        return self.gaussian_sigma if self.gaussian_sigma is not None else 0.02 * math.hypot(width, height)


@dataclass(frozen=True)
class DetectPseudoConfig:
    n: int = 10
    min_texture: float = 1e-3

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")


# --------------------------------------------------------------------------- fixed pieces


def red_mask(frame: Frame | np.ndarray) -> np.ndarray:
    """Per-pixel red prior ``(R/255) * max(0, R - max(G, B)) / 255`` in [0, 1]."""
    image = frame.image if isinstance(frame, Frame) else frame
    return red_score(image)


def gaussian_target(point, sigma: float, shape: tuple[int, int]) -> np.ndarray:
    """Peak-normalized Gaussian centred on ``point`` (x, y) for an ``(H, W)`` map."""
    x, y = (point.x, point.y) if isinstance(point, AnnotatedPoint) else point
    H, W = shape
    if not (0 <= x < W and 0 <= y < H):
        raise ValueError(f"point ({x}, {y}) outside a {W}x{H} map")
    yy, xx = np.mgrid[0:H, 0:W]
    return np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2.0 * sigma ** 2))


def locate_source(fused: np.ndarray | torch.Tensor) -> tuple[int, int]:
    """(x, y) of the global maximum; ties go to the smallest row-major index."""
    m = fused.detach().cpu().numpy() if isinstance(fused, torch.Tensor) else np.asarray(fused)
    if not np.all(np.isfinite(m)):
        raise ValueError("heat map contains non-finite values")
    iy, ix = np.unravel_index(int(np.argmax(m)), m.shape)   # argmax returns the first maximum
    return int(ix), int(iy)


def soft_argmax(heat: torch.Tensor, temperature: float = 0.05) -> torch.Tensor:
    """Differentiable peak location, (B, H, W) -> (B, 2) as (x, y)."""
    B, H, W = heat.shape
    w = torch.softmax(heat.reshape(B, -1) / temperature, dim=1).reshape(B, H, W)
    xs = torch.arange(W, dtype=heat.dtype, device=heat.device)
    ys = torch.arange(H, dtype=heat.dtype, device=heat.device)
    return torch.stack([(w.sum(1) * xs).sum(1), (w.sum(2) * ys).sum(1)], 1)


# --------------------------------------------------------------------------- learned pieces


class HeatMapHead(nn.Module):
    """Two 3x3 convolutions and an upsampling transposed convolution, then a sigmoid."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.conv1 = nn.Conv2d(3, width, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.up = nn.ConvTranspose2d(width, 1, 4, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        H, W = x.shape[-2:]
        h = F.relu(self.conv2(F.relu(self.conv1(x))))
        out = self.up(h)[..., :H, :W]
        if out.shape[-2:] != (H, W):
            out = F.interpolate(out, size=(H, W), mode="bilinear", align_corners=False)
        return torch.sigmoid(out[:, 0])


class SpatialEncoder(nn.Module):
    """Four conv blocks, three of them stride 2: features at exactly stride 8."""

    stride = 8

    def __init__(self, channels: int = 32):
        super().__init__()
        c = channels
        self.blocks = nn.Sequential(
            nn.Conv2d(3, c // 2, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c // 2, c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1),
        )
        self.channels = c

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x)


class MultiScaleFusion(nn.Module):
    def __init__(self, feat_channels: int = 32, width: int = 16):
        super().__init__()
        self.q = nn.Linear(1, width, bias=False)
        self.k = nn.Linear(1, width, bias=False)
        with torch.no_grad():
            self.k.weight.copy_(self.q.weight.abs() + 0.1)
            self.q.weight.copy_(self.k.weight)
        self.v = nn.Linear(feat_channels, width)
        self.saliency = nn.Linear(width, 1)
        self.width = width

    def scale_heat(self, h: torch.Tensor, r: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
        """One scale. h, r: (B, L); p: (B, L, C). Returns (B, L)."""
        q = self.q(h[..., None])
        k = self.k(r[..., None])
        v = self.v(p)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.width), dim=-1)   # (B, Lq, Lk)
        received = attn.sum(1) - 1.0
        return F.softplus(self.saliency(v))[..., 0] * received

    def forward(self, F_h: torch.Tensor, F_r: torch.Tensor, F_p: torch.Tensor,
                return_scales: bool = False):
        """F_h, F_r: (B, H, W); F_p: (B, C, H/8, W/8). Returns (B, H, W) in [0, 1]."""
        B, H, W = F_h.shape
        total = torch.zeros_like(F_h)
        per_scale = []
        for s in SCALES:
            h_s, w_s = max(1, H // s), max(1, W // s)
            hs = F.adaptive_avg_pool2d(F_h[:, None], (h_s, w_s))[:, 0]
            rs = F.adaptive_avg_pool2d(F_r[:, None], (h_s, w_s))[:, 0]
            ps = F.interpolate(F_p, size=(h_s, w_s), mode="bilinear", align_corners=False)
            args = (hs.reshape(B, -1), rs.reshape(B, -1), ps.flatten(2).transpose(1, 2))
            if torch.is_grad_enabled() and s == 1:
                # the full-resolution attention matrix is recomputed in backward instead of stored
                heat = checkpoint(self.scale_heat, *args, use_reentrant=False)
            else:
                heat = self.scale_heat(*args)
            heat = heat.reshape(B, 1, h_s, w_s)
            if not torch.isfinite(heat).all():
                raise FloatingPointError(f"non-finite attention output at scale 1/{s}")
            up = heat if s == 1 else F.interpolate(heat, size=(H, W), mode="bilinear", align_corners=False)
            per_scale.append(up[:, 0])
            total = total + up[:, 0]
        total = F.relu(total)
        peak = total.flatten(1).amax(1).clamp_min(0)[:, None, None]
        out = torch.where(peak > 0, total / torch.where(peak > 0, peak, torch.ones_like(peak)), total)
        return (out, per_scale) if return_scales else out


def fuse_multiscale(F_h, F_r, F_p, params: MultiScaleFusion) -> torch.Tensor:
    """Functional form; accepts unbatched (H, W) / (C, h, w) tensors too."""
    single = F_h.dim() == 2
    if single:
        F_h, F_r, F_p = F_h[None], F_r[None], F_p[None]
    out = params(F_h, F_r, F_p)
    return out[0] if single else out


class SourceDetector(nn.Module):
    def __init__(self, channels: int = 32, work_size: tuple[int, int] = WORK_SIZE):
        super().__init__()
        self.work_size = tuple(work_size)
        self.head = HeatMapHead()
        self.encoder = SpatialEncoder(channels)
        self.fusion = MultiScaleFusion(channels)

    def prepare(self, images: np.ndarray | Sequence[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
        """uint8 RGB frames -> (normalized image tensor, red mask) at working size."""
        W, H = self.work_size
        imgs, masks = [], []
        for im in images:
            small = cv2.resize(np.asarray(im), (W, H), interpolation=cv2.INTER_AREA)
            mask = cv2.resize(red_score(im).astype(np.float32), (W, H), interpolation=cv2.INTER_AREA)
            imgs.append(small.astype(np.float32).transpose(2, 0, 1) / 255.0)
            masks.append(mask)
        dtype = next(self.parameters()).dtype
        return torch.as_tensor(np.stack(imgs), dtype=dtype), torch.as_tensor(np.stack(masks), dtype=dtype)

    def forward(self, x: torch.Tensor, red: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (fused heat map, head heat map), both (B, H, W) at working size."""
        F_h = self.head(x)
        F_p = self.encoder(x)
        return self.fusion(F_h, red, F_p), F_h


def to_frame_coords(xy, work_size: tuple[int, int], frame_size: tuple[int, int]) -> tuple[float, float]:
    """Map working-grid pixel centres to frame pixel coordinates."""
    (w0, h0), (w1, h1) = work_size, frame_size
    return ((xy[0] + 0.5) * w1 / w0 - 0.5, (xy[1] + 0.5) * h1 / h0 - 0.5)


def to_work_coords(xy, work_size: tuple[int, int], frame_size: tuple[int, int]) -> tuple[float, float]:
    (w0, h0), (w1, h1) = work_size, frame_size
    return ((xy[0] + 0.5) * w0 / w1 - 0.5, (xy[1] + 0.5) * h0 / h1 - 0.5)


def heatmap_at_frame(detector: SourceDetector, image: np.ndarray) -> np.ndarray:
    """Fused heat map resampled to the frame's resolution."""
    with torch.no_grad():
        x, r = detector.prepare([image])
        fused, _ = detector(x, r)
    m = fused[0].cpu().numpy().astype(np.float32)
    return cv2.resize(m, (image.shape[1], image.shape[0]), interpolation=cv2.INTER_LINEAR)


def detect_point(detector: SourceDetector, frame: Frame | np.ndarray) -> tuple[int, int]:
    image = frame.image if isinstance(frame, Frame) else frame
    return locate_source(heatmap_at_frame(detector, image))


# --------------------------------------------------------------------------- flow pseudo-labels


class FlowUnavailable(RuntimeError):
    """The flow at a tracked location cannot be trusted (flat texture or invalid values)."""


def _texture(image: np.ndarray, xy) -> float:
    gray = cv2.cvtColor(np.ascontiguousarray(image), cv2.COLOR_RGB2GRAY).astype(np.float32) / 255.0
    eig = cv2.cornerMinEigenVal(gray, 7)
    x = int(np.clip(round(xy[0]), 0, gray.shape[1] - 1))
    y = int(np.clip(round(xy[1]), 0, gray.shape[0] - 1))
    return float(eig[y, x])


def propagate_pseudo(clip: Clip, g: int, point: AnnotatedPoint, cfg: DetectPseudoConfig = DetectPseudoConfig(),
                     flow_fn: FlowFn = block_flow, return_path: bool = False):
    """Carry ``point`` from frame ``g`` to ``g + n`` by chaining per-frame flow at its location.

    Raises ``FlowUnavailable`` on flat texture or non-finite flow, so the caller
    can drop the pseudo label.
    """
    n = cfg.n
    if g + n >= len(clip):
        raise ValueError(f"g + n = {g + n} is past the clip end ({len(clip)} frames)")
    xy = np.array([point.x, point.y], float)
    W, H = clip.width, clip.height
    path = [AnnotatedPoint(g, float(xy[0]), float(xy[1]), point.source)]
    for t in range(g, g + n):
        if cfg.min_texture > 0 and _texture(clip[t].image, xy) < cfg.min_texture:
            raise FlowUnavailable(f"flat texture at frame {t}, point {tuple(np.round(xy, 2))}")
        v = sample_flow(flow_fn(clip[t].image, clip[t + 1].image), xy)
        if not np.all(np.isfinite(v)):
            raise FlowUnavailable(f"non-finite flow at frame {t}")
        xy = np.clip(xy + v, [0, 0], [W - 1e-3, H - 1e-3])
        path.append(AnnotatedPoint(t + 1, float(xy[0]), float(xy[1]), "pseudo"))
    return path if return_path else path[-1]


# --------------------------------------------------------------------------- loss


def huber(residual: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    a = residual.abs()
    return torch.where(a <= delta, 0.5 * residual ** 2, delta * (a - 0.5 * delta))


def spatial_loss(H_p: torch.Tensor, H_gt: torch.Tensor, pseudo_maps: Sequence[torch.Tensor],
                 P_pred: torch.Tensor, P_gt: torch.Tensor, cfg: SpatialLossConfig = SpatialLossConfig(),
                 pseudo_preds: Sequence[torch.Tensor] | None = None) -> torch.Tensor:
    """``l1 * MSE(H_p, H_gt) + (l2 / N) * sum_n MSE(., H_pseudo_n) + delta * Huber(P_pred, P_gt)``.

    The Huber term is applied per axis and summed. By default each pseudo map is
    compared with ``H_p``; pass ``pseudo_preds`` to compare against the
    predictions made on the pseudo-labelled frames instead.
    """
    if H_p.shape != H_gt.shape:
        raise ValueError(f"shape mismatch: {tuple(H_p.shape)} vs {tuple(H_gt.shape)}")
    preds = [H_p] * len(pseudo_maps) if pseudo_preds is None else list(pseudo_preds)
    if len(preds) != len(pseudo_maps):
        raise ValueError("one prediction per pseudo map")
    for m, p in zip(pseudo_maps, preds):
        if m.shape != p.shape:
            raise ValueError(f"pseudo map shape {tuple(m.shape)} does not match {tuple(p.shape)}")
    if P_pred.shape != P_gt.shape:
        raise ValueError("coordinate shape mismatch")
    loss = cfg.lambda1 * ((H_p - H_gt) ** 2).mean()
    if pseudo_maps:
        loss = loss + cfg.lambda2 / len(pseudo_maps) * sum(((p - m) ** 2).mean() for p, m in zip(preds, pseudo_maps))
    coord = huber(P_pred - P_gt, 1.0).sum(-1).mean()
    return loss + cfg.delta * coord
