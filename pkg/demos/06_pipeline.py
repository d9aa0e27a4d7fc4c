"""
End-to-end runs and efficiency
==============================

Evaluation mode isolates stages: detection and tracking start from the
labelled onset. Deployment mode chains the streaming onset into detection
and tracking. Untrained models are enough to show the plumbing.
"""


import numpy as np
import torch

from bleedtrack.config import RunConfig
from bleedtrack.metrics import point_metrics
from bleedtrack.pipeline import measure_efficiency, run_pipeline
from bleedtrack.synth import SceneConfig, generate_scene, sparse_labels
from bleedtrack.workflows import untrained_models

torch.manual_seed(0)
models = untrained_models(RunConfig())
clip, gt = generate_scene(SceneConfig(length=100, onset_frame=70, seed=2), "demo")
labels = sparse_labels(clip.id, gt)

ev = run_pipeline(clip, labels, "evaluation", models)
t0, (x0, y0) = ev.init
print(f"evaluation: init frame {t0} at ({x0:.1f}, {y0:.1f}), predicted onset {ev.onset.onset_frame}")
frames = [f for f, *_ in ev.track[1:]]
rep = point_metrics([(x, y) for _, x, y, _ in ev.track[1:]], [tuple(gt.source_track[f]) for f in frames],
                    clip.diagonal)
print("tracking accuracy:", {k: round(v, 3) for k, v in rep.to_json()["point_acc"].items()})

dep = run_pipeline(clip, None, "deployment", models)
print("deployment:", dep.status, "onset", dep.onset.onset_frame)

eff = measure_efficiency(models, clip, frames=5, repeats=2)
for name, s in eff["stages"].items():
    print(f"{name:7s} {s['fps']:7.1f} fps  {s['latency_ms']:7.2f} ms/frame  params {eff['params'][name]}")
print(f"peak RSS {eff['peak_rss_mb']:.0f} MB")
