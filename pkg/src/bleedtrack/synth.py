"""Procedural ESD-like clips with exact ground truth.

The scene is a textured tissue canvas translated by a smooth random motion
field. From the onset frame a red blob grows from the bleeding source and
streams in a fixed direction; the source advects with the tissue. Disturbances
(flush, reflection, instrument, obscuring blood, camera jitter) are composited
on top and never change the ground-truth coordinates.
"""

from __future__ import annotations

import logging
import math
import shutil
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from .imaging import limit_red, red_score
from .video import Clip, ClipLabels, AnnotatedPoint, save_clip, write_json

log = logging.getLogger(__name__)

DISTURBANCE_KINDS = ("jitter", "flush", "reflection", "instrument", "obscure")
BACKGROUND_RED_LIMIT = 0.14
MARGIN = 56
ANNOTATION_STRIDE = 30

_DARK = np.array([150.0, 112.0, 95.0])
_LIGHT = np.array([228.0, 192.0, 168.0])
_VESSEL = np.array([128.0, 92.0, 82.0])
_BLOOD = np.array([160.0, 22.0, 30.0])
_BLOOD_CORE = np.array([188.0, 8.0, 16.0])
_POOLED = np.array([112.0, 18.0, 22.0])
_SEED = np.array([212, 0, 8], np.uint8)      # strongest red in the scene, marks the source pixel
_FLUSH = np.array([205.0, 215.0, 225.0])
_INSTRUMENT = np.array([46.0, 47.0, 52.0])


@dataclass(frozen=True)
class DisturbanceEvent:
    kind: str
    start: int
    end: int
    intensity: float = 0.5

    def __post_init__(self):
        if self.kind not in DISTURBANCE_KINDS:
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        if not 0 <= self.start < self.end:
            raise ValueError(f"disturbance needs 0 <= start < end, got [{self.start}, {self.end})")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError("intensity must be in [0, 1]")

    def envelope(self, t: int) -> float:
        if not self.start <= t < self.end:
            return 0.0
        return min(1.0, (t - self.start + 1) / 3.0, (self.end - t) / 3.0)


@dataclass(frozen=True)
class SceneConfig:
    width: int = 128
    height: int = 96
    length: int = 150
    onset_frame: int = 120
    source_start: tuple[float, float] | None = None
    tissue_motion_amplitude: float = 0.8
    bleed_growth_rate: float = 0.12
    disturbance_schedule: tuple[DisturbanceEvent, ...] = ()
    seed: int = 0
    appearance_drift: float = 0.0
    noise_std: float = 1.5
    max_bleed_radius: float | None = None

    def __post_init__(self):
        if self.width < 16 or self.height < 16 or self.length < 1:
            raise ValueError("scene must be at least 16x16 with one frame")
        if not 0 <= self.onset_frame < self.length:
            raise ValueError(f"onset {self.onset_frame} outside [0, {self.length})")
        if self.source_start is not None:
            x, y = self.source_start
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ValueError("source_start outside the frame")
        for ev in self.disturbance_schedule:
            if ev.end > self.length:
                raise ValueError(f"disturbance {ev} ends after the clip")
        object.__setattr__(self, "disturbance_schedule", tuple(self.disturbance_schedule))

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def to_json(self) -> dict:
        d = asdict(self)
        d["disturbance_schedule"] = [asdict(e) for e in self.disturbance_schedule]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        d["disturbance_schedule"] = tuple(DisturbanceEvent(**e) for e in d.get("disturbance_schedule", ()))
        if d.get("source_start") is not None:
            d["source_start"] = tuple(d["source_start"])
        return cls(**d)


@dataclass(frozen=True)
class SynthGroundTruth:
    onset_frame: int
    source_track: np.ndarray          # (T, 2) float x, y for every frame
    visibility: np.ndarray            # (T,) bool
    scenario_tags: tuple[frozenset[str], ...]
    displacement: np.ndarray          # (T, 2) global tissue displacement since frame 0

    def point_track(self, t0: int, xy) -> np.ndarray:
        """Oracle trajectory of an arbitrary tissue point seen at ``xy`` in frame ``t0``."""
        return np.asarray(xy, dtype=float) + self.displacement - self.displacement[t0]

    def to_json(self) -> dict:
        return {
            "onset_frame": self.onset_frame,
            "frames": [
                {"x": float(x), "y": float(y), "visible": bool(v), "tags": sorted(tags),
                 "dx": float(d[0]), "dy": float(d[1])}
                for (x, y), v, tags, d in zip(self.source_track, self.visibility,
                                              self.scenario_tags, self.displacement)
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SynthGroundTruth":
        fr = d["frames"]
        return cls(
            int(d["onset_frame"]),
            np.array([[f["x"], f["y"]] for f in fr], dtype=float),
            np.array([f["visible"] for f in fr], dtype=bool),
            tuple(frozenset(f["tags"]) for f in fr),
            np.array([[f["dx"], f["dy"]] for f in fr], dtype=float),
        )


# --------------------------------------------------------------------------- rendering helpers


def _value_noise(rng: np.random.Generator, h: int, w: int, cells: tuple[int, ...], weights) -> np.ndarray:
    out = np.zeros((h, w), np.float32)
    for c, wt in zip(cells, weights):
        gh, gw = max(2, h // c + 2), max(2, w // c + 2)
        grid = rng.random((gh, gw)).astype(np.float32)
        out += wt * cv2.resize(grid, (w, h), interpolation=cv2.INTER_CUBIC)
    out -= out.min()
    out /= max(out.max(), 1e-6)
    return out


def _tissue_canvas(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    tone = _value_noise(rng, h, w, (48, 20, 9, 4, 2), (1.0, 0.8, 0.7, 0.6, 0.25))
    img = _DARK + tone[..., None] * (_LIGHT - _DARK)
    # a few dark vessels
    vessels = np.zeros((h, w), np.float32)
    for _ in range(4):
        pts = np.cumsum(rng.normal(0, 9, size=(8, 2)), axis=0) + rng.uniform((0, 0), (w, h))
        cv2.polylines(vessels, [pts.astype(np.int32)], False, 1.0, thickness=int(rng.integers(1, 3)))
    vessels = cv2.GaussianBlur(vessels, (0, 0), 0.8)[..., None]
    img = img * (1 - 0.5 * vessels) + _VESSEL * 0.5 * vessels
    return img.astype(np.float32)


def _motion(rng: np.random.Generator, length: int, amplitude: float) -> np.ndarray:
    """Smooth global displacement: per axis, a sum of three sinusoids with RMS speed ``amplitude``."""
    t = np.arange(length, dtype=float)
    disp = np.zeros((length, 2))
    if amplitude <= 0:
        return disp
    for ax in range(2):
        periods = rng.uniform(70, 260, size=3)
        phases = rng.uniform(0, 2 * np.pi, size=3)
        amps = rng.uniform(0.5, 1.0, size=3)
        speed_rms = math.sqrt(float(np.sum((amps * 2 * np.pi / periods) ** 2)) / 2)
        amps *= (amplitude / math.sqrt(2)) / speed_rms
        disp[:, ax] = np.sum(amps[:, None] * np.sin(2 * np.pi * t[None, :] / periods[:, None] + phases[:, None]), 0)
    return disp - disp[0]


def _shake(rng: np.random.Generator, length: int, ev: DisturbanceEvent) -> np.ndarray:
    out = np.zeros((length, 2))
    n = ev.end - ev.start
    raw = rng.normal(0, 1, size=(n + 4, 2))
    smooth = (raw[:-4] + raw[1:-3] + raw[2:-2] + raw[3:-1] + raw[4:]) / math.sqrt(5)
    env = np.array([ev.envelope(t) for t in range(ev.start, ev.end)])
    out[ev.start:ev.end] = smooth * (1.0 + 3.0 * ev.intensity) * env[:, None]
    return out


def _disc_alpha(xx, yy, cx, cy, radius):
    d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    return np.clip(radius - d + 0.5, 0.0, 1.0), d


def _capsule_alpha(xx, yy, p0, p1, radius):
    p0 = np.asarray(p0, float)
    v = np.asarray(p1, float) - p0
    L2 = float(v @ v)
    if L2 < 1e-9:
        return _disc_alpha(xx, yy, p0[0], p0[1], radius)[0]
    s = np.clip(((xx - p0[0]) * v[0] + (yy - p0[1]) * v[1]) / L2, 0, 1)
    d = np.sqrt((xx - p0[0] - s * v[0]) ** 2 + (yy - p0[1] - s * v[1]) ** 2)
    return np.clip(radius - d + 0.5, 0.0, 1.0)


def _instrument_polygon(ev: DisturbanceEvent, t: int, w: int, h: int, side: int, offset: float):
    """Tool shaft entering from one border; the tip sweeps in and out over the event."""
    phase = (t - ev.start) / max(1, ev.end - ev.start - 1)
    reach = (0.35 + 0.45 * ev.intensity) * math.sin(math.pi * phase)
    width = 0.12 * min(w, h) + 10 * ev.intensity
    if side == 0:   # from the left
        base = np.array([0.0, offset * h])
        tip = base + [reach * w, 0.15 * h]
    elif side == 1:  # from the right
        base = np.array([w - 1.0, offset * h])
        tip = base + [-reach * w, -0.15 * h]
    else:           # from the bottom
        base = np.array([offset * w, h - 1.0])
        tip = base + [0.1 * w, -reach * h]
    d = tip - base
    n = np.array([-d[1], d[0]]) / (np.linalg.norm(d) + 1e-9) * width / 2
    return np.array([base + n, tip + 0.6 * n, tip - 0.6 * n, base - n])


def _scenario_tags(schedule, t: int, onset: int) -> frozenset[str]:
    tags = {ev.kind for ev in schedule if ev.envelope(t) > 0 and (ev.kind != "obscure" or t >= onset)}
    return frozenset(tags) if tags else frozenset({"clear"})


# --------------------------------------------------------------------------- main entry points


def generate_scene(config: SceneConfig, clip_id: str = "synthetic", patient_id: str = "",
                   fps: float = 30.0) -> tuple[Clip, SynthGroundTruth]:
    """Render a clip and its exact ground truth. Deterministic in ``config.seed``."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    W, H, T, T0 = cfg.width, cfg.height, cfg.length, cfg.onset_frame
    ch, cw = H + 2 * MARGIN, W + 2 * MARGIN

    canvas = _tissue_canvas(rng, ch, cw)
    canvas2 = _tissue_canvas(rng, ch, cw) if cfg.appearance_drift > 0 else None
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float32)
    vignette = (1.0 - 0.22 * (((xx - W / 2) / (W / 2)) ** 2 + ((yy - H / 2) / (H / 2)) ** 2))[..., None]

    if cfg.source_start is None:
        start = rng.uniform((0.3 * W, 0.3 * H), (0.7 * W, 0.7 * H))
    else:
        start = np.asarray(cfg.source_start, dtype=float)
        rng.uniform(size=2)  # keep the random stream aligned with the default branch
    disp = _motion(rng, T, cfg.tissue_motion_amplitude)
    for ev in cfg.disturbance_schedule:
        if ev.kind == "jitter":
            disp = disp + _shake(rng, T, ev)
    disp = np.clip(disp, -(MARGIN - 2), MARGIN - 2)

    raw_track = start[None, :] + disp
    track = np.stack([np.clip(raw_track[:, 0], 0, W - 1), np.clip(raw_track[:, 1], 0, H - 1)], 1)
    visible = np.all(np.isclose(track, raw_track), axis=1)

    bleed_dir = rng.uniform(0, 2 * np.pi)
    bleed_u = np.array([math.cos(bleed_dir), math.sin(bleed_dir)])
    max_r = cfg.max_bleed_radius if cfg.max_bleed_radius is not None else 0.07 * cfg.diagonal
    flicker_phase = rng.uniform(0, 2 * np.pi)

    # per-event fixed randomness
    ev_state = []
    for ev in cfg.disturbance_schedule:
        st = {}
        if ev.kind == "reflection":
            st["spots"] = rng.uniform((0.1 * W, 0.1 * H, 1.5), (0.9 * W, 0.9 * H, 4.5), size=(3, 3))
            st["drift"] = rng.normal(0, 0.3, size=(3, 2))
        elif ev.kind == "instrument":
            st["side"] = int(rng.integers(0, 3))
            st["offset"] = float(rng.uniform(0.3, 0.7))
        elif ev.kind == "obscure":
            st["shift"] = rng.normal(0, 3, size=2) + 4 * bleed_u
        elif ev.kind == "jitter":
            st["angle"] = float(rng.uniform(0, np.pi))
        ev_state.append(st)

    frames = []
    tags = []
    for t in range(T):
        dx, dy = disp[t]
        M = np.array([[1, 0, MARGIN - dx], [0, 1, MARGIN - dy]], dtype=np.float64)
        flags = cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP
        bg = cv2.warpAffine(canvas, M, (W, H), flags=flags, borderMode=cv2.BORDER_REFLECT)
        if canvas2 is not None:
            a = min(1.0, cfg.appearance_drift * t / max(1, T - 1))
            bg2 = cv2.warpAffine(canvas2, M, (W, H), flags=flags, borderMode=cv2.BORDER_REFLECT)
            bg = (1 - a) * bg + a * bg2
            bg = bg * (1.0 + 0.25 * a * np.array([-0.3, 0.05, 0.35], np.float32))
        img = bg * vignette * (1.0 + 0.02 * math.sin(0.07 * t + flicker_phase))
        blood_alpha = np.zeros((H, W), np.float32)

        if t >= T0:
            age = t - T0
            radius = min(max_r, 1.5 + cfg.bleed_growth_rate * age)
            sx, sy = track[t]
            disc, d = _disc_alpha(xx, yy, sx, sy, radius)
            tail = (sx, sy) + bleed_u * min(2.5 * max_r, 2.2 * cfg.bleed_growth_rate * age)
            streak = _capsule_alpha(xx, yy, (sx, sy), tail, 0.6 * radius)
            blood_alpha = np.maximum(disc, 0.9 * streak)
            core = np.exp(-(d ** 2) / (2 * max(0.6, 0.45 * radius) ** 2))[..., None]
            colour = _BLOOD + core * (_BLOOD_CORE - _BLOOD)
            img = img * (1 - blood_alpha[..., None]) + colour * blood_alpha[..., None]

        for ev, st in zip(cfg.disturbance_schedule, ev_state):
            e = ev.envelope(t) * ev.intensity
            if e <= 0:
                continue
            if ev.kind == "obscure" and t >= T0:
                grow = (t - ev.start + 1) * (0.25 + 0.5 * ev.intensity)
                cx, cy = track[t] + st["shift"]
                pool_a, _ = _disc_alpha(xx, yy, cx, cy, min(0.45 * cfg.diagonal, 3 + grow))
                pool_a = cv2.GaussianBlur(pool_a, (0, 0), 2.0) * 0.85 * e
                img = img * (1 - pool_a[..., None]) + _POOLED * pool_a[..., None]
                blood_alpha = np.maximum(blood_alpha, pool_a)
            elif ev.kind == "flush":
                gray = img.mean(axis=2, keepdims=True)
                img = img * (1 - 0.5 * e) + gray * 0.5 * e
                img = img * (1 - 0.65 * e) + _FLUSH * 0.65 * e
                img = cv2.GaussianBlur(img, (0, 0), 0.5 + 2.5 * e)
            elif ev.kind == "reflection":
                for (px, py, pr), drift in zip(st["spots"], st["drift"]):
                    cx, cy = px + drift[0] * (t - ev.start), py + drift[1] * (t - ev.start)
                    a = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * pr ** 2)) * min(1.0, 1.4 * e)
                    img = img * (1 - a[..., None]) + 252.0 * a[..., None]
            elif ev.kind == "instrument":
                poly = _instrument_polygon(ev, t, W, H, st["side"], st["offset"])
                mask = np.zeros((H, W), np.float32)
                cv2.fillConvexPoly(mask, np.round(poly * 16).astype(np.int32), 1.0,
                                   lineType=cv2.LINE_AA, shift=4)
                img = img * (1 - mask[..., None]) + _INSTRUMENT * mask[..., None]
                ix, iy = np.round(track[t]).astype(int)
                if mask[iy, ix] > 0.5:
                    visible[t] = False
            elif ev.kind == "jitter":
                length = 1 + int(round(6 * e))
                if length > 1:
                    k = np.zeros((length, length), np.float32)
                    c = (length - 1) / 2
                    ang = st["angle"]
                    cv2.line(k, (int(round(c - c * math.cos(ang))), int(round(c - c * math.sin(ang)))),
                             (int(round(c + c * math.cos(ang))), int(round(c + c * math.sin(ang)))), 1.0)
                    img = cv2.filter2D(img, -1, k / k.sum(), borderType=cv2.BORDER_REFLECT)

        if cfg.noise_std > 0:
            img = img + rng.normal(0.0, cfg.noise_std, size=img.shape).astype(np.float32)
        out = np.clip(np.round(img), 0, 255).astype(np.uint8)
        out = limit_red(out, BACKGROUND_RED_LIMIT, mask=blood_alpha < 0.05)
        if t >= T0 and visible[t]:
            ix, iy = np.round(track[t]).astype(int)
            out[iy, ix] = _SEED
        frames.append(out)
        tags.append(_scenario_tags(cfg.disturbance_schedule, t, T0))

    clip_tags = frozenset().union(*tags[T0:]) if T0 < T else frozenset({"clear"})
    clip = Clip.from_images(clip_id, frames, fps=fps, scenario_tags=clip_tags, patient_id=patient_id)
    gt = SynthGroundTruth(T0, track, visible, tuple(tags), disp)
    return clip, gt


PRESETS = {
    # (min events, max events, intensity range, motion amplitude)
    "easy": (0, 1, (0.25, 0.5), 0.6),
    "moderate": (1, 3, (0.35, 0.75), 0.8),
    "hard": (3, 5, (0.55, 1.0), 1.0),
}


def random_schedule(rng: np.random.Generator, length: int, onset: int, preset: str = "moderate",
                    kinds: tuple[str, ...] = DISTURBANCE_KINDS) -> tuple[DisturbanceEvent, ...]:
    lo, hi, (imin, imax), _ = PRESETS[preset]
    events = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        kind = str(rng.choice(kinds))
        dur = int(rng.integers(8, 31))
        first = onset if kind == "obscure" else 0
        if length - dur <= first:
            continue
        s = int(rng.integers(first, length - dur))
        events.append(DisturbanceEvent(kind, s, s + dur, float(rng.uniform(imin, imax))))
    return tuple(sorted(events, key=lambda e: (e.start, e.kind)))


def clip_seed(seed: int, ordinal: int) -> int:
    return int(np.random.SeedSequence([seed, ordinal]).generate_state(1)[0])


def variant_config(base: SceneConfig, seed: int, preset: str = "moderate",
                   kinds: tuple[str, ...] = DISTURBANCE_KINDS) -> SceneConfig:
    """Randomize per-clip knobs (growth rate, disturbances) around ``base``."""
    rng = np.random.default_rng(seed)
    amp = base.tissue_motion_amplitude if preset not in PRESETS else PRESETS[preset][3]
    return replace(
        base,
        seed=seed,
        tissue_motion_amplitude=amp * float(rng.uniform(0.7, 1.3)),
        bleed_growth_rate=base.bleed_growth_rate * float(rng.uniform(0.7, 1.3)),
        disturbance_schedule=base.disturbance_schedule or random_schedule(
            rng, base.length, base.onset_frame, preset, kinds),
    )


def sparse_labels(clip_id: str, gt: SynthGroundTruth, stride: int = ANNOTATION_STRIDE) -> ClipLabels:
    """Onset frame plus one human point every ``stride`` frames from the onset on."""
    T = len(gt.source_track)
    pts = tuple(AnnotatedPoint(t, float(gt.source_track[t, 0]), float(gt.source_track[t, 1]), "human")
                for t in range(gt.onset_frame, T, stride))
    return ClipLabels(clip_id, gt.onset_frame, pts)


def generate_corpus(n_patients: int, clips_per_patient: int, base_config: SceneConfig, seed: int,
                    out_dir: Path | str, preset: str = "moderate") -> dict:
    """Write a corpus in the on-disk clip layout and return its manifest.

    Every clip gets an ``oracle.json`` with the dense ground truth; only the
    benchmark code reads it.
    """
    if n_patients < 3:
        raise ValueError("a corpus needs at least 3 patients")
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    manifest = {
        "version": 1,
        "seed": seed,
        "preset": preset,
        "n_patients": n_patients,
        "clips_per_patient": clips_per_patient,
        "base_config": base_config.to_json(),
        "patients": {},
        "clips": [],
    }
    try:
        ordinal = 0
        for p in range(n_patients):
            pid = f"P{p:03d}"
            manifest["patients"][pid] = []
            for c in range(clips_per_patient):
                cid = f"{pid}_C{c:02d}"
                cfg = variant_config(base_config, clip_seed(seed, ordinal), preset)
                clip, gt = generate_scene(cfg, cid, pid)
                d = save_clip(clip, out, sparse_labels(cid, gt))
                written.append(d)
                write_json(d / "oracle.json", gt.to_json())
                write_json(d / "scene.json", cfg.to_json())
                manifest["patients"][pid].append(cid)
                manifest["clips"].append({"id": cid, "patient_id": pid, "dir": cid, "frames": len(clip)})
                ordinal += 1
        write_json(out / "manifest.json", manifest)
    except Exception:
        log.error("corpus generation failed; removing %d partial clips", len(written))
        for d in written:
            shutil.rmtree(d, ignore_errors=True)
        (out / "manifest.json").unlink(missing_ok=True)
        raise
    return manifest


def load_manifest(corpus: Path | str) -> dict:
    import json
    with open(Path(corpus) / "manifest.json") as fh:
        return json.load(fh)


def load_oracle(clip_dir: Path | str) -> SynthGroundTruth:
    import json
    with open(Path(clip_dir) / "oracle.json") as fh:
        return SynthGroundTruth.from_json(json.load(fh))


def drift_config(seed: int, length: int = 600, width: int = 128, height: int = 96) -> SceneConfig:
    """Long clip with strong appearance drift, used for memory-refresh experiments."""
    return SceneConfig(width=width, height=height, length=length, onset_frame=0, seed=seed,
                       tissue_motion_amplitude=0.8, bleed_growth_rate=0.05, appearance_drift=1.0)


def red_peak(image: np.ndarray) -> tuple[int, int]:
    s = red_score(image)
    iy, ix = np.unravel_index(int(np.argmax(s)), s.shape)
    return int(ix), int(iy)
