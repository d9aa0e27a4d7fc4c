"""Sparse-to-dense labels for tracking.

For every pair of human labels 30 frames apart:

1. match keypoints near the first label to the frame 30 frames later;
2. track each matched point forward for 30 frames with a point tracker;
3. smooth each raw trajectory with a constant-velocity Kalman filter whose
   final state is pulled onto its matched endpoint, followed by an RTS pass.

The same smoothing is applied to the tracked source point itself, with the
second human label as its endpoint.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import cv2
import numpy as np

from .flow import lk_image, lk_points
from .video import AnnotatedPoint, Clip, ClipLabels, Frame, write_json

log = logging.getLogger(__name__)

SPAN = 30
MAX_LONG = 731


@dataclass(frozen=True)
class MatchConfig:
    radius: float = 50.0
    min_confidence: float = 0.7
    matcher: str = "corner-ncc"
    max_corners: int = 200
    patch: int = 11
    ransac_px: float | None = 3.0   # geometric consistency filter; None disables it

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if not 0 < self.min_confidence < 1:
            raise ValueError("min_confidence must lie in (0, 1)")
        if self.matcher not in MATCHERS:
            raise ValueError(f"unknown matcher {self.matcher!r}; choose from {sorted(MATCHERS)}")


@dataclass(frozen=True)
class KalmanConfig:
    q: float = 1.0
    r: float = 4.0
    r_anchor: float = 0.25
    p0_pos: float = 4.0
    p0_vel: float = 25.0


@dataclass(frozen=True)
class PseudoPointSet:
    anchor: tuple[float, float]
    radius: float
    min_confidence: float
    pairs: tuple[tuple[tuple[float, float], tuple[float, float], float], ...] = ()
    fallback: bool = False

    def __post_init__(self):
        ax, ay = self.anchor
        for (x, y), _, c in self.pairs:
            if self.fallback:
                continue
            if np.hypot(x - ax, y - ay) > self.radius + 1e-9:
                raise ValueError("pseudo point outside the anchor disc")
            if not c > self.min_confidence:
                raise ValueError("pseudo point below the confidence threshold")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def sources(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs], float).reshape(-1, 2)

    @property
    def targets(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs], float).reshape(-1, 2)


@dataclass(frozen=True)
class Trajectory:
    start_frame: int
    points: np.ndarray                       # (31, 2)
    smoothed: bool = False
    endpoint_anchor: tuple[float, float] | None = None
    confidence: float = 1.0

    def __post_init__(self):
        if self.points.shape != (SPAN + 1, 2):
            raise ValueError(f"trajectory must hold {SPAN + 1} points, got {self.points.shape}")


# --------------------------------------------------------------------------- matching


def _gray(image: np.ndarray) -> np.ndarray:
    return lk_image(image).astype(np.float32)


def _disc_mask(shape: tuple[int, int], centre, radius: float) -> np.ndarray:
    mask = np.zeros(shape, np.uint8)
    cv2.circle(mask, (int(round(centre[0])), int(round(centre[1]))), int(np.floor(radius)), 255, -1)
    return mask


def _corners(gray: np.ndarray, mask: np.ndarray, max_corners: int) -> np.ndarray:
    pts = cv2.goodFeaturesToTrack(gray, max_corners, 0.01, 3, mask=mask, blockSize=5)
    if pts is None:
        return np.zeros((0, 2), np.float32)
    crit = (cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, 30, 0.01)
    pts = cv2.cornerSubPix(gray, pts.astype(np.float32), (3, 3), (-1, -1), crit)
    return pts.reshape(-1, 2)


def _descriptors(gray: np.ndarray, pts: np.ndarray, patch: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean, unit-norm patches; their dot product is the NCC score."""
    half = patch // 2
    h, w = gray.shape
    keep = (pts[:, 0] >= half) & (pts[:, 0] < w - half - 1) & (pts[:, 1] >= half) & (pts[:, 1] < h - half - 1)
    pts = pts[keep]
    desc = []
    for x, y in pts:
        p = cv2.getRectSubPix(gray, (patch, patch), (float(x), float(y))).ravel().astype(np.float64)
        p -= p.mean()
        desc.append(p / (np.linalg.norm(p) + 1e-9))
    return pts, np.array(desc).reshape(len(pts), patch * patch)


def _mutual_nn(sim: np.ndarray) -> list[tuple[int, int]]:
    if sim.size == 0:
        return []
    fwd = sim.argmax(1)
    bwd = sim.argmax(0)
    return [(i, int(j)) for i, j in enumerate(fwd) if bwd[j] == i]


def corner_ncc_matcher(f_t: np.ndarray, f_t30: np.ndarray, centre_t, centre_t30, cfg: MatchConfig):
    g0, g1 = _gray(f_t), _gray(f_t30)
    pts0 = _corners(g0, _disc_mask(g0.shape, centre_t, cfg.radius), cfg.max_corners)
    # the target frame is searched in a wider disc: the region may have moved
    pts1 = _corners(g1, _disc_mask(g1.shape, centre_t30, cfg.radius + 10), 2 * cfg.max_corners)
    pts0, d0 = _descriptors(g0, pts0, cfg.patch)
    pts1, d1 = _descriptors(g1, pts1, cfg.patch)
    if len(pts0) == 0 or len(pts1) == 0:
        return []
    sim = d0 @ d1.T
    return [(tuple(pts0[i]), tuple(pts1[j]), float(sim[i, j])) for i, j in _mutual_nn(sim)]


def orb_matcher(f_t: np.ndarray, f_t30: np.ndarray, centre_t, centre_t30, cfg: MatchConfig):
    """Binary-descriptor alternative; confidence is 1 - Hamming distance / 256."""
    orb = cv2.ORB_create(nfeatures=cfg.max_corners, edgeThreshold=8, patchSize=15, fastThreshold=5)
    g0 = cv2.cvtColor(f_t, cv2.COLOR_RGB2GRAY)
    g1 = cv2.cvtColor(f_t30, cv2.COLOR_RGB2GRAY)
    k0, d0 = orb.detectAndCompute(g0, _disc_mask(g0.shape, centre_t, cfg.radius))
    k1, d1 = orb.detectAndCompute(g1, _disc_mask(g1.shape, centre_t30, cfg.radius + 10))
    if d0 is None or d1 is None:
        return []
    matches = cv2.BFMatcher(cv2.NORM_HAMMING, crossCheck=True).match(d0, d1)
    return [(k0[m.queryIdx].pt, k1[m.trainIdx].pt, 1.0 - m.distance / 256.0) for m in matches]


MATCHERS: dict[str, Callable] = {"corner-ncc": corner_ncc_matcher, "orb": orb_matcher}


def consistent_matches(pairs, threshold: float):
    """Keep matches agreeing with one RANSAC similarity transform; repetitive texture yields outliers."""
    if len(pairs) < 3:
        return pairs
    src = np.array([p[0] for p in pairs], np.float32)
    dst = np.array([p[1] for p in pairs], np.float32)
    _, inl = cv2.estimateAffinePartial2D(src, dst, method=cv2.RANSAC, ransacReprojThreshold=threshold,
                                         maxIters=2000, confidence=0.999, refineIters=10)
    if inl is None:
        return pairs
    return tuple(p for p, k in zip(pairs, inl.ravel()) if k)


def match_region(f_t: Frame, f_t30: Frame, anchor: AnnotatedPoint, cfg: MatchConfig = MatchConfig(),
                 anchor_t30: AnnotatedPoint | None = None) -> PseudoPointSet:
    """Mutual matches from the disc ``N(anchor, r)`` in ``f_t`` into ``f_t30`` with confidence above S.

    ``anchor_t30`` (the label on the later frame, when known) centres the
    search there; otherwise the anchor position is reused.
    """
    centre30 = anchor.xy if anchor_t30 is None else anchor_t30.xy
    raw = MATCHERS[cfg.matcher](f_t.image, f_t30.image, anchor.xy, centre30, cfg)
    ax, ay = anchor.xy
    pairs = tuple(
        ((float(p[0]), float(p[1])), (float(q[0]), float(q[1])), float(c))
        for p, q, c in raw
        if c > cfg.min_confidence and np.hypot(p[0] - ax, p[1] - ay) <= cfg.radius
    )
    if cfg.ransac_px is not None:
        pairs = consistent_matches(pairs, cfg.ransac_px)
    pairs = tuple(sorted(pairs, key=lambda m: (m[0][1], m[0][0])))
    return PseudoPointSet(anchor.xy, cfg.radius, cfg.min_confidence, pairs)


def with_fallback(points: PseudoPointSet, anchor_t30: AnnotatedPoint | None) -> PseudoPointSet:
    """Empty match sets fall back to the anchor itself as one pseudo point of confidence 1."""
    if len(points) or anchor_t30 is None:
        return points
    log.info("no matches around %s; using the anchor as the only pseudo point", points.anchor)
    return PseudoPointSet(points.anchor, points.radius, points.min_confidence,
                          ((points.anchor, anchor_t30.xy, 1.0),), fallback=True)


# --------------------------------------------------------------------------- trackers


class PointTracker(Protocol):
    name: str

    def track(self, images: np.ndarray, start: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """images (L, H, W, 3), start (n, 2) on images[0] -> positions (L, n, 2), ok (n,)."""


class LKTracker:
    name = "lk"

    def __init__(self, max_error: float = 30.0):
        self.max_error = max_error

    def track(self, images: np.ndarray, start: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        L = len(images)
        pts = np.asarray(start, float).reshape(-1, 2)
        out = np.zeros((L, len(pts), 2))
        out[0] = pts
        ok = np.ones(len(pts), bool)
        H, W = images.shape[1:3]
        prev = lk_image(images[0])
        for t in range(1, L):
            curr = lk_image(images[t])
            nxt, good = lk_points(prev, curr, out[t - 1], self.max_error, highpass_sigma=0)
            inside = (nxt[:, 0] >= 0) & (nxt[:, 0] < W) & (nxt[:, 1] >= 0) & (nxt[:, 1] < H)
            ok &= good & inside
            out[t] = np.where((good & inside)[:, None], nxt, out[t - 1])
            prev = curr
        return out, ok


class ModelTracker:
    """Adaptor exposing a learned point tracker through the ``PointTracker`` protocol."""

    name = "model"

    def __init__(self, model, min_confidence: float = 0.0):
        self.model = model
        self.min_confidence = min_confidence

    def track(self, images: np.ndarray, start: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        from .track import track_points
        pos, conf = track_points(self.model, images, np.asarray(start, float))
        return pos, conf.mean(0) >= self.min_confidence


TRACKERS: dict[str, Callable[..., PointTracker]] = {"lk": LKTracker, "model": ModelTracker}


def propagate_trajectory(points: PseudoPointSet, clip: Clip, tracker: PointTracker, t: int) -> list[Trajectory]:
    """One raw 31-frame trajectory per pseudo point, starting at frame ``t``."""
    if t + SPAN >= len(clip):
        raise ValueError(f"frame {t} + {SPAN} is past the clip end")
    if len(points) == 0:
        return []
    images = np.stack([clip[i].image for i in range(t, t + SPAN + 1)])
    pos, ok = tracker.track(images, points.sources)
    trajs = []
    for i, (pair, good) in enumerate(zip(points.pairs, ok)):
        if not good:
            log.info("dropping pseudo point %d at frame %d: tracker lost it", i, t)
            continue
        if not np.all(np.isfinite(pos[:, i])):
            log.info("dropping pseudo point %d at frame %d: non-finite track", i, t)
            continue
        trajs.append(Trajectory(t, pos[:, i].copy(), False, pair[1], pair[2]))
    return trajs


# --------------------------------------------------------------------------- smoothing


def cv_model(q: float) -> tuple[np.ndarray, np.ndarray]:
    """Transition and process noise of a 2-D constant-velocity model, state (x, y, vx, vy)."""
    F = np.eye(4)
    F[0, 2] = F[1, 3] = 1.0
    Q = np.zeros((4, 4))
    blk = q * np.array([[1 / 3, 1 / 2], [1 / 2, 1.0]])
    for ax in range(2):
        idx = np.ix_([ax, ax + 2], [ax, ax + 2])
        Q[idx] = blk
    return F, Q


def kalman_smooth(traj: Trajectory, cfg: KalmanConfig = KalmanConfig()) -> Trajectory:
    """Forward Kalman filter plus RTS backward pass, anchored on ``traj.endpoint_anchor``.

    Frames 1..29 use the raw tracked points as measurements. At the last frame
    the predicted position is replaced by the raw final point and then
    corrected by the anchor, so the final estimate always lies between the two.
    """
    if traj.endpoint_anchor is None:
        raise ValueError("trajectory has no endpoint anchor")
    z = np.asarray(traj.points, float)
    anchor = np.asarray(traj.endpoint_anchor, float)
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(anchor))):
        raise ValueError("non-finite trajectory or anchor")
    n = len(z)
    F, Q = cv_model(cfg.q)
    H = np.hstack([np.eye(2), np.zeros((2, 2))])
    xs_f = np.zeros((n, 4))
    Ps_f = np.zeros((n, 4, 4))
    xs_p = np.zeros((n, 4))
    Ps_p = np.zeros((n, 4, 4))
    x = np.array([z[0, 0], z[0, 1], 0.0, 0.0])
    P = np.diag([cfg.p0_pos, cfg.p0_pos, cfg.p0_vel, cfg.p0_vel])
    xs_f[0], Ps_f[0] = x, P
    for t in range(1, n):
        xp = F @ x
        Pp = F @ P @ F.T + Q
        xs_p[t], Ps_p[t] = xp, Pp
        if t < n - 1:
            R = cfg.r * np.eye(2)
            S = H @ Pp @ H.T + R
            K = Pp @ H.T @ np.linalg.inv(S)
            x = xp + K @ (z[t] - H @ xp)
            P = (np.eye(4) - K @ H) @ Pp
        else:
            start = xp.copy()
            start[:2] = z[t]
            if cfg.r_anchor == 0:
                x = start.copy()
                x[:2] = anchor
                # condition velocity on the exact position, other blocks follow the gain limit
                K = Pp @ H.T @ np.linalg.inv(H @ Pp @ H.T)
                x[2:] = start[2:] + (K @ (anchor - z[t]))[2:]
                P = (np.eye(4) - K @ H) @ Pp
            else:
                S = H @ Pp @ H.T + cfg.r_anchor * np.eye(2)
                K = Pp @ H.T @ np.linalg.inv(S)
                x = start + K @ (anchor - z[t])
                P = (np.eye(4) - K @ H) @ Pp
            P = 0.5 * (P + P.T)
        xs_f[t], Ps_f[t] = x, P
    xs = xs_f.copy()
    for t in range(n - 2, -1, -1):
        C = Ps_f[t] @ F.T @ np.linalg.inv(Ps_p[t + 1])
        xs[t] = xs_f[t] + C @ (xs[t + 1] - xs_p[t + 1])
    if cfg.r_anchor == 0:
        xs[-1, :2] = anchor
    return Trajectory(traj.start_frame, xs[:, :2].copy(), True, traj.endpoint_anchor, traj.confidence)


# --------------------------------------------------------------------------- dense labels and samples


@dataclass(frozen=True)
class DensePoint:
    track_id: str
    x: float
    y: float
    confidence: float
    provenance: str     # matched | tracked | smoothed | human


@dataclass
class DenseLabels:
    clip_id: str
    n_frames: int
    frames: dict[int, list[DensePoint]] = field(default_factory=dict)
    spans: list[dict] = field(default_factory=list)

    def add(self, t: int, p: DensePoint) -> None:
        self.frames.setdefault(t, []).append(p)

    def source_track(self) -> dict[int, tuple[float, float]]:
        out = {}
        for t, pts in self.frames.items():
            for p in pts:
                if p.track_id == "source":
                    out[t] = (p.x, p.y)
        return out

    def points_at(self, t: int, include_source: bool = False) -> list[DensePoint]:
        return [p for p in self.frames.get(t, []) if include_source or p.track_id != "source"]

    def to_json(self) -> dict:
        return {
            "version": 1,
            "clip_id": self.clip_id,
            "n_frames": self.n_frames,
            "spans": self.spans,
            "frames": [
                {"frame": t, "points": [
                    {"track_id": p.track_id, "x": round(p.x, 6), "y": round(p.y, 6),
                     "confidence": round(p.confidence, 6), "provenance": p.provenance}
                    for p in self.frames[t]]}
                for t in sorted(self.frames)
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "DenseLabels":
        out = cls(d["clip_id"], int(d["n_frames"]), spans=list(d.get("spans", [])))
        for fr in d["frames"]:
            out.frames[int(fr["frame"])] = [DensePoint(**p) for p in fr["points"]]
        return out


def save_dense_labels(labels: DenseLabels, clip_dir: Path | str) -> Path:
    path = Path(clip_dir) / "pseudo_labels.json"
    write_json(path, labels.to_json())
    return path


def load_dense_labels(clip_dir: Path | str) -> DenseLabels:
    with open(Path(clip_dir) / "pseudo_labels.json") as fh:
        return DenseLabels.from_json(json.load(fh))


def _add_trajectory(out: DenseLabels, tid: str, traj: Trajectory, interior_only: bool = False) -> None:
    last = len(traj.points) - 1
    for k, (x, y) in enumerate(traj.points):
        if interior_only and k in (0, last):
            continue
        prov = "matched" if k == 0 else ("smoothed" if traj.smoothed else "tracked")
        out.add(traj.start_frame + k, DensePoint(tid, float(x), float(y), traj.confidence, prov))


def dense_labels(clip: Clip, labels: ClipLabels, match_cfg: MatchConfig = MatchConfig(),
                 tracker: PointTracker | None = None, kalman: KalmanConfig = KalmanConfig()) -> DenseLabels:
    """Pseudo-label every 30-frame span between consecutive human labels."""
    tracker = tracker or LKTracker()
    out = DenseLabels(clip.id, len(clip))
    human = sorted(labels.points, key=lambda p: p.frame_index)
    for p in human:
        out.add(p.frame_index, DensePoint("source", p.x, p.y, 1.0, "human"))
    for a, b in zip(human, human[1:]):
        t = a.frame_index
        if b.frame_index - t != SPAN:
            log.info("skipping span %d-%d: labels are not %d frames apart", t, b.frame_index, SPAN)
            continue
        pts = with_fallback(match_region(clip[t], clip[t + SPAN], a, match_cfg, b), b)
        raw_trajs = propagate_trajectory(pts, clip, tracker, t)
        span = {"start": t, "matches": len(pts), "fallback": pts.fallback, "tracked": len(raw_trajs),
                "endpoint_residual_raw": [], "endpoint_residual_smoothed": []}
        for i, raw in enumerate(raw_trajs):
            sm = kalman_smooth(raw, kalman)
            anchor = np.asarray(raw.endpoint_anchor)
            span["endpoint_residual_raw"].append(float(np.linalg.norm(raw.points[-1] - anchor)))
            span["endpoint_residual_smoothed"].append(float(np.linalg.norm(sm.points[-1] - anchor)))
            _add_trajectory(out, f"s{t}_p{i}", sm)
        src_pos, ok = tracker.track(np.stack([clip[i].image for i in range(t, t + SPAN + 1)]),
                                    np.array([a.xy]))
        src = Trajectory(t, src_pos[:, 0], False, b.xy, 1.0 if ok[0] else 0.5)
        src_sm = kalman_smooth(src, kalman)
        span["source_residual_raw"] = float(np.linalg.norm(src.points[-1] - np.asarray(b.xy)))
        span["source_residual_smoothed"] = float(np.linalg.norm(src_sm.points[-1] - np.asarray(b.xy)))
        # the human labels at both ends stay authoritative
        _add_trajectory(out, "source", src_sm, interior_only=True)
        out.spans.append(span)
    return out


@dataclass(frozen=True)
class TrainSample:
    kind: str                       # short | long
    clip_id: str
    start: int
    stop: int                       # exclusive
    source: np.ndarray              # (L, 2) dense source labels, NaN where unknown
    source_provenance: tuple[str, ...]
    points: np.ndarray              # (n, L, 2) pseudo trajectories, NaN where undefined
    point_confidence: np.ndarray    # (n,)

    def __post_init__(self):
        L = self.stop - self.start
        if self.kind == "short" and L != SPAN + 1:
            raise ValueError("short samples hold exactly 31 frames")
        if self.kind == "long" and not SPAN + 1 <= L <= MAX_LONG:
            raise ValueError("long samples hold 31 to 731 frames")

    def __len__(self) -> int:
        return self.stop - self.start

    def frames(self, clip: Clip) -> Clip:
        return clip.subclip(self.start, self.stop)


def _sample(kind: str, clip_id: str, start: int, stop: int, dense: DenseLabels) -> TrainSample:
    L = stop - start
    src = np.full((L, 2), np.nan)
    prov = ["none"] * L
    tracks: dict[str, np.ndarray] = {}
    confs: dict[str, float] = {}
    for t in range(start, stop):
        for p in dense.frames.get(t, []):
            if p.track_id == "source":
                src[t - start] = (p.x, p.y)
                prov[t - start] = p.provenance
            else:
                arr = tracks.setdefault(p.track_id, np.full((L, 2), np.nan))
                arr[t - start] = (p.x, p.y)
                confs[p.track_id] = p.confidence
    ids = sorted(tracks)
    pts = np.stack([tracks[i] for i in ids]) if ids else np.zeros((0, L, 2))
    return TrainSample(kind, clip_id, start, stop, src, tuple(prov), pts, np.array([confs[i] for i in ids]))


def build_samples(clip: Clip, labels: ClipLabels, dense: DenseLabels, mode: str = "hybrid",
                  seed: int = 0) -> list[TrainSample]:
    """Short (31-frame, anchored at human labels), long (label-to-end) or both interleaved."""
    if len(clip) < SPAN + 1:
        raise ValueError("clip shorter than 31 frames")
    if mode not in ("short", "long", "hybrid"):
        raise ValueError(f"unknown mode {mode!r}")
    anchors = sorted(p.frame_index for p in labels.points)
    short, long_ = [], []
    if mode in ("short", "hybrid"):
        short = [_sample("short", clip.id, a, a + SPAN + 1, dense) for a in anchors if a + SPAN < len(clip)]
    if mode in ("long", "hybrid") and anchors:
        start = anchors[0]
        stop = min(len(clip), start + MAX_LONG)
        if stop - start >= SPAN + 1:
            long_ = [_sample("long", clip.id, start, stop, dense)]
    if mode != "hybrid":
        return short or long_
    samples = short + long_
    order = np.random.default_rng(seed).permutation(len(samples))
    return [samples[i] for i in order]
