"""
Synthetic bleeding scenes
=========================

Generate one clip with exact ground truth, look at what the generator
records and write a small corpus to disk.
"""

import tempfile
from pathlib import Path

import numpy as np

from bleedtrack.synth import (DisturbanceEvent, SceneConfig, generate_corpus, generate_scene, load_manifest,
                              red_peak, sparse_labels)

# a 128x96 clip whose source starts bleeding at frame 40, with a flush and some camera jitter
cfg = SceneConfig(length=120, onset_frame=40, seed=1, disturbance_schedule=(
    DisturbanceEvent("flush", 60, 75, 0.6),
    DisturbanceEvent("jitter", 85, 100, 0.5),
))
clip, gt = generate_scene(cfg, "demo")
print(f"{len(clip)} frames of {clip.width}x{clip.height}, onset at {gt.onset_frame}")

# the source moves with the tissue
disp = np.linalg.norm(gt.source_track[-1] - gt.source_track[gt.onset_frame])
print(f"source moved {disp:.1f} px between onset and the last frame")

# per-frame scenario tags follow the disturbance schedule
print("tags at frame 65:", sorted(gt.scenario_tags[65]))
print("tags at frame 90:", sorted(gt.scenario_tags[90]))

# the reddest pixel sits on the source once bleeding has started
t = gt.onset_frame + 5
print("red peak", red_peak(clip[t].image), "source", tuple(int(v) for v in np.round(gt.source_track[t])))

# human-style labels: the onset plus a point every 30 frames
labels = sparse_labels(clip.id, gt)
print("annotated frames:", [p.frame_index for p in labels.points])

# a corpus: 6 patients, 2 clips each, with a manifest and one oracle file per clip
with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp) / "corpus"
    generate_corpus(6, 2, SceneConfig(length=60, onset_frame=30), seed=0, out_dir=root)
    manifest = load_manifest(root)
    print(f"corpus with {len(manifest['clips'])} clips:", sorted(p.name for p in (root / 'P000_C00').iterdir()))
