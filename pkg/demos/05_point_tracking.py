"""
Point tracking with adapters and memory refresh
===============================================

Pretrain the tracker briefly on synthetic tracks, wrap it with low-rank
adapters and track a source with and without periodic memory refresh.
"""

import logging

import numpy as np
import torch

from bleedtrack.adapters import AdapterConfig, apply_adapters, parameter_counts
from bleedtrack.synth import drift_config, generate_scene
from bleedtrack.track import RefreshPolicy, track_clip
from bleedtrack.track_train import PretrainConfig, pretrain_scenes, pretrain_tracker

logging.basicConfig(level=logging.INFO, format="%(message)s")
torch.manual_seed(0)

cfg = PretrainConfig(steps=120, n_scenes=8)
model, history = pretrain_tracker(pretrain_scenes(cfg, seed=0), cfg)
print(f"pretraining: mean error over the last steps {np.mean(history['err_px'][-20:]):.2f} px")

# adapters start at zero, so the wrapped model behaves exactly like the base
counts = parameter_counts(apply_adapters(model, AdapterConfig(rank=4)))
print(f"adapter parameters: {counts['adapter']} of {counts['total']} ({100 * counts['adapter'] / counts['total']:.2f}%)")

# a long clip with strong appearance drift
clip, gt = generate_scene(drift_config(seed=3, length=300), "drift")
init = (0, tuple(gt.source_track[0]))
for name, policy in (("no refresh", RefreshPolicy(enabled=False)), ("refresh 60", RefreshPolicy(60))):
    out = track_clip(clip, init, model, policy)
    err = np.linalg.norm(np.array([p for p, _ in out]) - gt.source_track, axis=1)
    print(f"{name:10s}: mean error {err.mean():.2f} px, final {err[-1]:.2f} px")
