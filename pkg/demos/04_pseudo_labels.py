"""
Sparse-to-dense pseudo labels
=============================

Between two human labels 30 frames apart, matched keypoints are tracked
and smoothed with a Kalman filter whose final state is pulled onto the
matched endpoint. The same is done for the source point itself.
"""

import logging

import numpy as np

from bleedtrack.pseudo import KalmanConfig, Trajectory, build_samples, dense_labels, kalman_smooth
from bleedtrack.synth import SceneConfig, generate_scene, sparse_labels

logging.basicConfig(level=logging.WARNING)

clip, gt = generate_scene(SceneConfig(length=100, onset_frame=10, seed=4), "demo")
labels = sparse_labels(clip.id, gt)
dense = dense_labels(clip, labels)
for span in dense.spans:
    print(f"span @{span['start']}: {span['matches']} matches, {span['tracked']} tracked, "
          f"source residual {span['source_residual_raw']:.2f} -> {span['source_residual_smoothed']:.2f} px")

# how far the dense source track is from the oracle
src = dense.source_track()
err = [np.hypot(*(np.array(src[t]) - gt.source_track[t])) for t in sorted(src)]
print(f"dense source labels: {len(src)} frames, median error {np.median(err):.2f} px, "
      f"max {np.max(err):.2f} px (diagonal {clip.diagonal:.0f})")

# smoothing in isolation: a noisy straight line with a shifted endpoint
rng = np.random.default_rng(0)
line = np.stack([np.linspace(10, 40, 31), np.linspace(20, 25, 31)], 1)
noisy = line + rng.normal(0, 1.0, line.shape)
for r_anchor in (1.0, 0.0):
    sm = kalman_smooth(Trajectory(0, noisy, endpoint_anchor=(40.0, 25.0)), KalmanConfig(r_anchor=r_anchor))
    print(f"r_anchor={r_anchor}: final point {np.round(sm.points[-1], 3)}, "
          f"rms to line {np.sqrt(((sm.points - line) ** 2).mean()):.2f} (raw {np.sqrt(((noisy - line) ** 2).mean()):.2f})")

# training samples: 31-frame short clips plus longer ones
samples = build_samples(clip, labels, dense, "hybrid", seed=0)
print("samples:", [(s.kind, s.start, s.stop) for s in samples])
