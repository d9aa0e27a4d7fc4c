"""
Bleeding onset detection
========================

Train a small onset detector on a handful of clips, then locate the onset
offline (earliest confident window) and in streaming mode (first confident
window).
"""

import logging

import numpy as np
import torch

from bleedtrack.onset import OnsetConfig, decide_offline, decide_streaming, locate_onset, WindowPrediction
from bleedtrack.onset_train import OnsetTrainConfig, train_onset
from bleedtrack.synth import SceneConfig, clip_seed, generate_scene, variant_config

logging.basicConfig(level=logging.INFO, format="%(message)s")
torch.manual_seed(0)

# the two decision rules on a hand-written prediction table
preds = [WindowPrediction(theta=0.5, s_conf=0.9, window_start=40),
         WindowPrediction(theta=0.9, s_conf=0.8, window_start=10),
         WindowPrediction(theta=0.1, s_conf=0.2, window_start=0)]
print("offline  ->", decide_offline(preds, N=20).onset_frame)    # min(40 + 10, 10 + 18)
print("streaming ->", decide_streaming(preds, N=20).onset_frame)  # first valid window in order

# a desk-sized model: shorter windows, fewer layers
cfg = OnsetConfig(window_N=30, layers=2, d_model=32)
base = SceneConfig(length=90, onset_frame=60)
make = lambda i: generate_scene(variant_config(base, clip_seed(5, i)), f"c{i}")
train = [(clip, gt.onset_frame) for clip, gt in map(make, range(24))]
det, history = train_onset(train, cfg, OnsetTrainConfig(epochs=8, gate_epochs=2, max_drop=30))
print("epoch losses:", np.round(history["epoch_loss"], 3))

# a few minutes of training is far from the full protocol; expect rough estimates
for i in (100, 101, 102):
    clip, gt = make(i)
    for mode in ("offline", "streaming"):
        res = locate_onset(clip, cfg, det, mode)
        print(f"clip {i} {mode:9s} onset {res.onset_frame} (true {gt.onset_frame}), window {res.contributing_window}")
