"""
Bleeding source detection
=========================

The detector fuses a learned heat map with a red-mask prior over four
scales. Here it is trained briefly on onset frames and queried on a
held-out clip.
"""

import numpy as np
import torch

from bleedtrack.detect import detect_point, gaussian_target, heatmap_at_frame, locate_source, red_mask
from bleedtrack.detect_train import DetectTrainConfig, detect_sample, train_detector
from bleedtrack.synth import SceneConfig, clip_seed, generate_scene, sparse_labels, variant_config

torch.manual_seed(0)

# the red prior is non-trainable: pure red scores 1, gray scores 0
px = np.array([[[255, 0, 0], [128, 128, 128], [200, 100, 50]]], np.uint8)
print("red mask:", np.round(red_mask(px)[0], 3))

# training targets are Gaussians centred on the labelled source
target = gaussian_target((20, 12), 3.0, (48, 64))
print("target peak at", locate_source(target))

base = SceneConfig(length=60, onset_frame=20)
scenes = [generate_scene(variant_config(base, clip_seed(9, i)), f"c{i}") for i in range(12)]
samples = [detect_sample(clip, sparse_labels(clip.id, gt)) for clip, gt in scenes]
cfg = DetectTrainConfig(epochs=4)
det, history = train_detector([s for s in samples if s is not None], cfg)
print("epoch losses:", np.round(history["epoch_loss"], 4))

clip, gt = generate_scene(variant_config(base, clip_seed(9, 500)), "held-out")
t = gt.onset_frame
x, y = detect_point(det, clip[t])
err = np.hypot(x - gt.source_track[t, 0], y - gt.source_track[t, 1])
gx, gy = gt.source_track[t]
print(f"detected ({x}, {y}), true ({gx:.1f}, {gy:.1f}), error {err:.1f} px")
heat = heatmap_at_frame(det, clip[t].image)
print("heat map", heat.shape, "max", float(heat.max()))
