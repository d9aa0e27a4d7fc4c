"""Clips, annotations, dataset splits and on-disk clip layout.

A clip on disk looks like::

    <clip_id>/frames/000000.png
    <clip_id>/meta.json        # fps, patient_id, scenario_tags
    <clip_id>/labels.json      # onset_frame and sparse points

Frames are stored RGB in memory; PNG files are written BGR by OpenCV.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import cv2
import numpy as np

SCENARIOS = ("clear", "obscure", "jitter", "reflection", "flush", "instrument")
VIDEO_SUFFIXES = {".mp4", ".avi", ".mov", ".mkv"}
_FRAME_RE = re.compile(r"^(\d+)$")


class ClipFormatError(ValueError):
    """Raised when a clip directory cannot be turned into a valid Clip."""


class FrameGapError(ClipFormatError):
    def __init__(self, index: int):
        super().__init__(f"gap at index {index}")
        self.index = index


class FrameReadError(ClipFormatError):
    def __init__(self, index: int, path: Path | str):
        super().__init__(f"cannot read frame {index} ({path})")
        self.index = index


@dataclass(frozen=True)
class Frame:
    index: int
    image: np.ndarray

    def __post_init__(self):
        img = self.image
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise ValueError("frame image must be HxWx3 uint8 RGB")
        if img.shape[0] < 16 or img.shape[1] < 16:
            raise ValueError("frames must be at least 16x16 pixels")
        if self.index < 0:
            raise ValueError("frame index must be non-negative")
        if img.flags.writeable:
            img = img.copy()
            img.flags.writeable = False
            object.__setattr__(self, "image", img)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass(frozen=True)
class Clip:
    id: str
    frames: tuple[Frame, ...]
    fps: float = 30.0
    scenario_tags: frozenset[str] = frozenset()
    patient_id: str = ""

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a clip needs at least one frame")
        for i, f in enumerate(self.frames):
            if f.index != i:
                raise ValueError(f"frame indices must run from 0 contiguously (found {f.index} at {i})")
        shape = self.frames[0].image.shape
        if any(f.image.shape != shape for f in self.frames):
            raise ValueError("all frames of a clip must share one resolution")
        unknown = set(self.scenario_tags) - set(SCENARIOS)
        if unknown:
            raise ValueError(f"unknown scenario tags {sorted(unknown)}")
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "scenario_tags", frozenset(self.scenario_tags))

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i: int) -> Frame:
        return self.frames[i]

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def images(self) -> np.ndarray:
        return np.stack([f.image for f in self.frames])

    def subclip(self, start: int, stop: int | None = None) -> "Clip":
        sel = self.frames[start:stop]
        frames = tuple(Frame(i, f.image) for i, f in enumerate(sel))
        return replace(self, frames=frames)

    @classmethod
    def from_images(cls, clip_id: str, images: Iterable[np.ndarray], **kw) -> "Clip":
        return cls(clip_id, tuple(Frame(i, im) for i, im in enumerate(images)), **kw)


@dataclass(frozen=True)
class AnnotatedPoint:
    frame_index: int
    x: float
    y: float
    source: str = "human"

    def __post_init__(self):
        if self.source not in ("human", "pseudo"):
            raise ValueError("source must be 'human' or 'pseudo'")

    def check_bounds(self, width: int, height: int) -> None:
        if not (0 <= self.x < width and 0 <= self.y < height):
            raise ValueError(f"point ({self.x}, {self.y}) outside a {width}x{height} frame")

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class OnsetLabel:
    clip_id: str
    onset_frame: int | None


@dataclass(frozen=True)
class ClipLabels:
    """Sparse ground truth for one clip. ``onset_frame`` is None for non-bleeding clips."""

    clip_id: str
    onset_frame: int | None
    points: tuple[AnnotatedPoint, ...] = ()

    @property
    def onset(self) -> OnsetLabel:
        return OnsetLabel(self.clip_id, self.onset_frame)

    def point_at(self, frame_index: int) -> AnnotatedPoint | None:
        for p in self.points:
            if p.frame_index == frame_index:
                return p
        return None

    def annotated_frames(self) -> list[int]:
        return sorted(p.frame_index for p in self.points)

    def shifted(self, offset: int) -> "ClipLabels":
        """Labels for a clip whose first ``offset`` frames were removed."""
        onset = None if self.onset_frame is None else self.onset_frame - offset
        if onset is not None and onset < 0:
            onset = None
        pts = tuple(replace(p, frame_index=p.frame_index - offset)
                    for p in self.points if p.frame_index >= offset)
        return ClipLabels(self.clip_id, onset, pts)

    def validate(self, clip: Clip) -> None:
        if self.onset_frame is not None and not 0 <= self.onset_frame < len(clip):
            raise ValueError(f"onset {self.onset_frame} outside clip of length {len(clip)}")
        for p in self.points:
            if not 0 <= p.frame_index < len(clip):
                raise ValueError(f"annotation at frame {p.frame_index} outside clip")
            p.check_bounds(clip.width, clip.height)

    def to_json(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "onset_frame": self.onset_frame,
            "points": [
                {"frame_index": p.frame_index, "x": float(p.x), "y": float(p.y), "source": p.source}
                for p in self.points
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ClipLabels":
        pts = tuple(AnnotatedPoint(int(p["frame_index"]), float(p["x"]), float(p["y"]),
                                   p.get("source", "human")) for p in d.get("points", []))
        onset = d.get("onset_frame")
        return cls(d["clip_id"], None if onset is None else int(onset), pts)


# --------------------------------------------------------------------------- disk I/O


def _read_json(path: Path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def write_json(path: Path | str, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _numbered_frames(frame_dir: Path) -> list[tuple[int, Path]]:
    found = []
    for p in frame_dir.iterdir():
        m = _FRAME_RE.match(p.stem)
        if m and p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"):
            found.append((int(m.group(1)), p))
    found.sort()
    return found


def _read_container(path: Path) -> list[np.ndarray]:
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise ClipFormatError(f"cannot open video container {path}")
    images = []
    while True:
        ok, bgr = cap.read()
        if not ok:
            break
        images.append(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB))
    cap.release()
    if not images:
        raise FrameReadError(0, path)
    return images


def load_clip(path: Path | str, fps: float | None = None) -> Clip:
    """Load a clip from a frame directory (or a video container) plus ``meta.json``.

    ``path`` may be the clip directory, its ``frames/`` subdirectory, or a video
    file sitting next to a ``meta.json`` sidecar.
    """
    path = Path(path)
    if path.is_file() and path.suffix.lower() in VIDEO_SUFFIXES:
        root = path.parent
        images = _read_container(path)
    else:
        root = path
        frame_dir = path / "frames" if (path / "frames").is_dir() else path
        if not frame_dir.is_dir():
            raise ClipFormatError(f"{path} is not a clip directory")
        numbered = _numbered_frames(frame_dir)
        if not numbered:
            raise ClipFormatError(f"no numbered frames in {frame_dir}")
        images = []
        for expect, (idx, fp) in enumerate(numbered):
            if idx != expect:
                raise FrameGapError(expect)
            bgr = cv2.imread(str(fp), cv2.IMREAD_COLOR)
            if bgr is None:
                raise FrameReadError(idx, fp)
            images.append(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB))

    meta_path = root / "meta.json"
    meta = _read_json(meta_path) if meta_path.exists() else {}
    clip_id = meta.get("clip_id", root.name)
    return Clip.from_images(
        clip_id,
        images,
        fps=float(fps if fps is not None else meta.get("fps", 30.0)),
        scenario_tags=frozenset(meta.get("scenario_tags", ())),
        patient_id=str(meta.get("patient_id", "")),
    )


def save_clip(clip: Clip, root: Path | str, labels: ClipLabels | None = None) -> Path:
    """Write ``clip`` under ``root/<clip.id>`` and return that directory."""
    out = Path(root) / clip.id
    frame_dir = out / "frames"
    frame_dir.mkdir(parents=True, exist_ok=True)
    for f in clip.frames:
        ok = cv2.imwrite(str(frame_dir / f"{f.index:06d}.png"), cv2.cvtColor(f.image, cv2.COLOR_RGB2BGR))
        if not ok:
            raise OSError(f"failed to write frame {f.index} of {clip.id}")
    write_json(out / "meta.json", {
        "clip_id": clip.id,
        "fps": clip.fps,
        "patient_id": clip.patient_id,
        "scenario_tags": sorted(clip.scenario_tags),
        "num_frames": len(clip),
        "width": clip.width,
        "height": clip.height,
    })
    if labels is not None:
        labels.validate(clip)
        write_json(out / "labels.json", labels.to_json())
    return out


def load_labels(clip_dir: Path | str) -> ClipLabels:
    clip_dir = Path(clip_dir)
    return ClipLabels.from_json(_read_json(clip_dir / "labels.json"))


def load_meta(clip_dir: Path | str) -> dict:
    return _read_json(Path(clip_dir) / "meta.json")


# --------------------------------------------------------------------------- splits


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    excluded: tuple[str, ...] = ()
    seed: int = 0
    clips: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def split_of(self, patient: str) -> str:
        for name in ("train", "val", "test", "excluded"):
            if patient in getattr(self, name):
                return name
        raise KeyError(patient)

    def clips_in(self, split: str) -> list[str]:
        return [c for p in getattr(self, split) for c in self.clips.get(p, ())]

    def to_manifest(self) -> dict:
        assignment = {p: self.split_of(p) for p in (*self.train, *self.val, *self.test, *self.excluded)}
        return {
            "seed": self.seed,
            "counts": {"train": len(self.train), "val": len(self.val), "test": len(self.test),
                       "excluded": len(self.excluded)},
            "assignment": dict(sorted(assignment.items())),
        }


def split_dataset(
    patients: Sequence[str] | dict[str, Sequence[str]],
    ratio: tuple[int, int, int] = (4, 1, 1),
    seed: int = 0,
    counts: tuple[int, int, int] | None = None,
) -> DatasetSplit:
    """Patient-level train/val/test split.

    Without ``counts`` the val and test sizes are ``floor(n * r / sum(ratio))`` and
    the remainder goes to train. ``counts`` forces exact sizes; patients left over
    when the counts sum to less than ``n`` are listed in ``excluded``.
    ``patients`` may be a mapping ``patient -> clip ids`` to carry clip lists along.
    """
    clip_map = {str(p): tuple(c) for p, c in patients.items()} if isinstance(patients, dict) else {}
    ids = sorted(str(p) for p in patients)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate patient ids")
    n = len(ids)
    if n < 3:
        raise ValueError(f"need at least 3 patients for a 3-way split, got {n}")
    if counts is not None:
        n_train, n_val, n_test = counts
        if min(counts) < 1 or sum(counts) > n:
            raise ValueError(f"counts {counts} do not fit {n} patients")
    else:
        total = sum(ratio)
        n_val = n * ratio[1] // total
        n_test = n * ratio[2] // total
        if n_val < 1 or n_test < 1:
            raise ValueError(f"{n} patients are too few for ratio {ratio}")
        n_train = n - n_val - n_test
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    train = tuple(sorted(shuffled[:n_train]))
    val = tuple(sorted(shuffled[n_train:n_train + n_val]))
    test = tuple(sorted(shuffled[n_train + n_val:n_train + n_val + n_test]))
    excluded = tuple(sorted(shuffled[n_train + n_val + n_test:]))
    return DatasetSplit(train, val, test, excluded, seed, clip_map)


# --------------------------------------------------------------------------- augmentation


class DroppedClip(NamedTuple):
    clip: Clip
    labels: ClipLabels | None
    offset: int


def random_prefix_drop(
    clip: Clip,
    max_drop: int = 60,
    seed: int | np.random.Generator | None = None,
    *,
    labels: ClipLabels | None = None,
    evaluation: bool = False,
) -> DroppedClip:
    """Drop a uniformly sampled number of leading frames in ``[0, max_drop]``.

    In evaluation mode the clip is returned untouched.
    """
    if len(clip) <= max_drop:
        raise ValueError(f"clip of length {len(clip)} is not longer than max_drop={max_drop}")
    if evaluation:
        return DroppedClip(clip, labels, 0)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    offset = int(rng.integers(0, max_drop + 1))
    new_labels = labels.shifted(offset) if labels is not None else None
    return DroppedClip(clip.subclip(offset), new_labels, offset)
