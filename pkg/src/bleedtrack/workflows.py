"""Corpus-level workflows behind the command line: training, labelling, evaluation and benchmarking.

Every workflow writes ``report.json`` (deterministic content only) and
``config.resolved.json`` into its output directory. Wall-clock numbers go to
a separate ``timings.json`` so reports stay byte-identical across reruns.
"""

from __future__ import annotations

import logging
import tempfile
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import cv2
import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, echo_config
from .detect import SourceDetector, detect_point, heatmap_at_frame
from .detect_train import detect_sample, train_detector
from .metrics import MetricsReport, onset_metrics, point_metrics, scenario_breakdown
from .onset import locate_onset
from .onset_train import train_onset
from .pipeline import Models, PipelineRun, measure_efficiency, run_pipeline
from .pseudo import TRACKERS, build_samples, dense_labels, load_dense_labels, save_dense_labels
from .report import emit_report, write_overlay, write_track_csv
from .synth import (SceneConfig, SynthGroundTruth, generate_corpus, generate_scene, load_manifest, load_oracle,
                    variant_config)
from .track import PointTrackerNet, RefreshPolicy, track_clip
from .track_train import finetune_tracker, pretrain_scenes, pretrain_tracker
from .video import Clip, ClipLabels, DatasetSplit, load_clip, load_labels, save_clip, split_dataset, write_json

log = logging.getLogger(__name__)

CHECKPOINT_NAMES = {"onset": "onset.ckpt", "detect": "detect.ckpt", "track": "track.ckpt"}


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def _finish(out: Path, cfg: RunConfig, command: str, seed: int, timings: dict, extra: dict | None = None) -> None:
    echo_config(cfg, out, command, seed, extra)
    write_json(out / "timings.json", {k: float(v) for k, v in timings.items()})


def _strip_times(history: dict) -> tuple[dict, dict]:
    clean = {k: v for k, v in history.items() if not k.endswith("_s")}
    times = {k: v for k, v in history.items() if k.endswith("_s")}
    return clean, times


# --------------------------------------------------------------------------- corpus


@dataclass
class Corpus:
    root: Path
    manifest: dict
    split: DatasetSplit

    def clip_dir(self, clip_id: str) -> Path:
        return self.root / clip_id

    def clip(self, clip_id: str) -> Clip:
        return load_clip(self.clip_dir(clip_id))

    def labels(self, clip_id: str) -> ClipLabels:
        return load_labels(self.clip_dir(clip_id))

    def oracle(self, clip_id: str) -> SynthGroundTruth:
        # benchmark-only: training workflows never call this
        return load_oracle(self.clip_dir(clip_id))

    def ids(self, split: str) -> list[str]:
        return self.split.clips_in(split)


def corpus_split(patients: dict, seed: int = 0) -> DatasetSplit:
    """4:1:1 patient split; corpora too small for the ratio get one val and one test patient."""
    try:
        return split_dataset(patients, seed=seed)
    except ValueError:
        n = len(patients)
        return split_dataset(patients, seed=seed, counts=(n - 2, 1, 1))


def open_corpus(root: Path | str, split_seed: int = 0) -> Corpus:
    root = Path(root)
    manifest = load_manifest(root)
    return Corpus(root, manifest, corpus_split(manifest["patients"], split_seed))


def synth_gen(cfg: RunConfig, n_patients: int, clips_per_patient: int, seed: int, out: Path,
              preset: str | None = None) -> dict:
    c = cfg.corpus
    base = SceneConfig(width=c.width, height=c.height, length=c.length, onset_frame=c.onset_frame)
    t0 = time.perf_counter()
    manifest = generate_corpus(n_patients, clips_per_patient, base, seed, out, preset or c.preset)
    split = corpus_split(manifest["patients"], c.split_seed)
    report = {"version": 1, "n_clips": len(manifest["clips"]), "n_patients": n_patients,
              "preset": manifest["preset"], "split": split.to_manifest()}
    write_json(out / "report.json", report)
    _finish(out, cfg, "synth-gen", seed, {"generate_s": time.perf_counter() - t0})
    return report


# --------------------------------------------------------------------------- onset


def _onset_pairs(corpus: Corpus, split: str) -> list[tuple[Clip, int | None]]:
    return [(corpus.clip(c), corpus.labels(c).onset_frame) for c in corpus.ids(split)]


def onset_eval(det, pairs, mode: str = "offline") -> tuple[MetricsReport, list[dict]]:
    preds, gts, rows = [], [], []
    for clip, onset in pairs:
        res = locate_onset(clip, det.cfg, det, mode)
        rows.append({"clip_id": clip.id, "onset_gt": onset, "onset_pred": res.onset_frame})
        if onset is not None:
            preds.append(res.onset_frame)
            gts.append(onset)
    return (onset_metrics(preds, gts) if preds else MetricsReport()), rows


def train_onset_cmd(cfg: RunConfig, corpus_dir: Path, seed: int, out: Path, epochs: int | None = None) -> dict:
    corpus = open_corpus(corpus_dir, cfg.corpus.split_seed)
    tcfg = replace(cfg.onset_train, seed=seed, **({"epochs": epochs} if epochs else {}))
    cfg = replace(cfg, onset_train=tcfg)
    train, val = _onset_pairs(corpus, "train"), _onset_pairs(corpus, "val")
    det, history = train_onset(train, cfg.onset, tcfg, val)
    ckpt = save_checkpoint(out / CHECKPOINT_NAMES["onset"], "onset", det, cfg.onset, {"train": asdict(tcfg)})
    history, times = _strip_times(history)
    t0 = time.perf_counter()
    val_report, rows = onset_eval(det, val)
    times["val_eval_s"] = time.perf_counter() - t0
    emit_report(out, {"val": val_report}, {"history": history, "checkpoint": ckpt.name, "clips": rows,
                                            "n_train": len(train), "n_val": len(val)})
    _finish(out, cfg, "train-onset", seed, times)
    return val_report.to_json()


def detect_onset_cmd(cfg: RunConfig, clip_dir: Path, checkpoint: Path, mode: str, seed: int, out: Path) -> dict:
    det, _ = load_checkpoint(checkpoint, "onset")
    clip = load_clip(clip_dir)
    t0 = time.perf_counter()
    res = locate_onset(clip, det.cfg, det, mode)
    elapsed = time.perf_counter() - t0
    body = {"version": 1, "clip_id": clip.id, "mode": mode, "onset_frame": res.onset_frame,
            "contributing_window": res.contributing_window, "status": "bleeding" if res.onset_frame is not None
            else "non-bleeding",
            "windows": [{"start": p.window_start, "theta": p.theta, "s_conf": p.s_conf} for p in res.predictions]}
    if (Path(clip_dir) / "labels.json").exists():
        gt = load_labels(clip_dir).onset_frame
        body["onset_gt"] = gt
        body["error"] = None if gt is None or res.onset_frame is None else gt - res.onset_frame
    write_json(out / "report.json", body)
    _finish(out, cfg, "detect-onset", seed, {"onset_s": elapsed})
    return body


# --------------------------------------------------------------------------- source detection


def _detect_eval(det: SourceDetector, corpus: Corpus, split: str) -> tuple[MetricsReport, list[dict]]:
    preds, gts, rows = [], [], []
    diag = None
    for cid in corpus.ids(split):
        labels = corpus.labels(cid)
        if labels.onset_frame is None or labels.point_at(labels.onset_frame) is None:
            continue
        clip = corpus.clip(cid)
        diag = clip.diagonal
        p = detect_point(det, clip[labels.onset_frame])
        g = labels.point_at(labels.onset_frame).xy
        preds.append(p)
        gts.append(g)
        rows.append({"clip_id": cid, "pred": list(p), "gt": list(g)})
    return (point_metrics(preds, gts, diag) if preds else MetricsReport()), rows


def train_detect_cmd(cfg: RunConfig, corpus_dir: Path, seed: int, out: Path, epochs: int | None = None) -> dict:
    corpus = open_corpus(corpus_dir, cfg.corpus.split_seed)
    tcfg = replace(cfg.detect_train, seed=seed, **({"epochs": epochs} if epochs else {}))
    cfg = replace(cfg, detect_train=tcfg)
    t0 = time.perf_counter()
    samples = [s for c in corpus.ids("train") if (s := detect_sample(corpus.clip(c), corpus.labels(c), tcfg))]
    times = {"samples_s": time.perf_counter() - t0}
    det, history = train_detector(samples, tcfg)
    history, t = _strip_times(history)
    times.update(t)
    ckpt = save_checkpoint(out / CHECKPOINT_NAMES["detect"], "detect", det,
                           extra={"train": asdict(tcfg), "huber": "per-axis sum"})
    val_report, rows = _detect_eval(det, corpus, "val")
    emit_report(out, {"val": val_report}, {"history": history, "checkpoint": ckpt.name, "clips": rows})
    _finish(out, cfg, "train-detect", seed, times)
    return val_report.to_json()


def read_image(path: Path | str) -> np.ndarray:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise OSError(f"cannot read image {path}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def detect_point_cmd(cfg: RunConfig, frame: Path, checkpoint: Path, seed: int, out: Path,
                     heatmap: Path | None = None) -> dict:
    det, _ = load_checkpoint(checkpoint, "detect")
    image = read_image(frame)
    t0 = time.perf_counter()
    heat = heatmap_at_frame(det, image)
    elapsed = time.perf_counter() - t0
    point = detect_point(det, image)
    body = {"version": 1, "frame": Path(frame).name, "x": point[0], "y": point[1],
            "size": [image.shape[1], image.shape[0]]}
    if heatmap is not None:
        norm = (heat - heat.min()) / max(float(heat.max() - heat.min()), 1e-12)
        Path(heatmap).parent.mkdir(parents=True, exist_ok=True)
        cv2.imwrite(str(heatmap), cv2.applyColorMap((norm * 255).astype(np.uint8), cv2.COLORMAP_JET))
        body["heatmap"] = Path(heatmap).name   # a name, not a path: reports stay comparable across output dirs
    write_json(out / "report.json", body)
    _finish(out, cfg, "detect-point", seed, {"detect_s": elapsed})
    return body


# --------------------------------------------------------------------------- pseudo labels and tracker


def make_tracker(name: str, checkpoint: Path | None = None):
    if name not in TRACKERS:
        raise ValueError(f"unknown tracker {name!r}; choose from {sorted(TRACKERS)}")
    if name == "model":
        if checkpoint is None:
            raise ValueError("the model tracker needs --checkpoint")
        model, _ = load_checkpoint(checkpoint, "track")
        return TRACKERS[name](model)
    return TRACKERS[name]()


def pseudo_label_cmd(cfg: RunConfig, corpus_dir: Path, tracker_name: str, seed: int, out: Path,
                     checkpoint: Path | None = None) -> dict:
    corpus = open_corpus(corpus_dir, cfg.corpus.split_seed)
    tracker = make_tracker(tracker_name, checkpoint)
    clips = {}
    t0 = time.perf_counter()
    for cid in corpus.ids("train"):
        dense = dense_labels(corpus.clip(cid), corpus.labels(cid), cfg.match, tracker, cfg.kalman)
        save_dense_labels(dense, corpus.clip_dir(cid))
        res_raw = [r for s in dense.spans for r in s["endpoint_residual_raw"]]
        res_sm = [r for s in dense.spans for r in s["endpoint_residual_smoothed"]]
        clips[cid] = {"spans": dense.spans, "n_points": sum(len(v) for v in dense.frames.values()),
                      "mean_endpoint_residual_raw": float(np.mean(res_raw)) if res_raw else None,
                      "mean_endpoint_residual_smoothed": float(np.mean(res_sm)) if res_sm else None}
    body = {"version": 1, "tracker": tracker_name, "clips": clips}
    write_json(out / "report.json", body)
    _finish(out, cfg, "pseudo-label", seed, {"label_s": time.perf_counter() - t0})
    return body


def human_points(labels: ClipLabels) -> dict[int, tuple[float, float]]:
    return {p.frame_index: p.xy for p in labels.points if p.source == "human"}


def finetune_data(corpus: Corpus, split: str, mode: str, seed: int, cfg: RunConfig):
    """(clip, sample, human labels) triples. Missing pseudo_labels.json files are generated with LK."""
    data = []
    for i, cid in enumerate(corpus.ids(split)):
        clip, labels = corpus.clip(cid), corpus.labels(cid)
        if not labels.points:
            continue
        try:
            dense = load_dense_labels(corpus.clip_dir(cid))
        except FileNotFoundError:
            dense = dense_labels(clip, labels, cfg.match, None, cfg.kalman)
        human = human_points(labels)
        data.extend((clip, s, human) for s in build_samples(clip, labels, dense, mode, seed + i))
    return data


def base_tracker(cfg: RunConfig, seed: int, base: Path | None = None) -> tuple[PointTrackerNet, dict]:
    if base is not None:
        model, _ = load_checkpoint(base, "track")
        return model, {"base": str(base)}
    scenes = pretrain_scenes(cfg.pretrain, seed, cfg.corpus.width, cfg.corpus.height)
    model, history = pretrain_tracker(scenes, replace(cfg.pretrain, seed=seed), cfg.tracker)
    return model, history


def track_eval(model: PointTrackerNet, corpus: Corpus, split: str, policy: RefreshPolicy,
               with_oracle: bool = True) -> dict[str, MetricsReport]:
    """Tracking from the labelled onset point, scored at annotated frames and (optionally) at every frame."""
    sp, sg, op, og, tags = [], [], [], [], []
    diag = None
    for cid in corpus.ids(split):
        labels = corpus.labels(cid)
        t0 = labels.onset_frame
        if t0 is None or labels.point_at(t0) is None:
            continue
        clip = corpus.clip(cid)
        diag = clip.diagonal
        out = track_clip(clip, (t0, labels.point_at(t0).xy), model, policy)
        human = human_points(labels)
        gt = corpus.oracle(cid) if with_oracle else None
        for i, (p, _) in enumerate(out[1:], start=1):
            t = t0 + i
            if t in human:
                sp.append(p)
                sg.append(human[t])
            if gt is not None:
                op.append(p)
                og.append(tuple(gt.source_track[t]))
                tags.append(gt.scenario_tags[t])
    sections = {"sparse": point_metrics(sp, sg, diag) if sp else MetricsReport()}
    if with_oracle and op:
        dense = point_metrics(op, og, diag)
        dense.scenarios = scenario_breakdown(op, og, tags, diag)
        sections["oracle"] = dense
    return sections


def finetune_track_cmd(cfg: RunConfig, corpus_dir: Path, mode: str, seed: int, out: Path,
                       base: Path | None = None) -> dict:
    corpus = open_corpus(corpus_dir, cfg.corpus.split_seed)
    fcfg = replace(cfg.finetune, seed=seed)
    cfg = replace(cfg, finetune=fcfg)
    times = {}
    t0 = time.perf_counter()
    model, pre_history = base_tracker(cfg, seed, base)
    pre_history, _ = _strip_times(pre_history)
    times["pretrain_s"] = time.perf_counter() - t0
    data = finetune_data(corpus, "train", mode, seed, cfg)
    model, history = finetune_tracker(model, data, fcfg)
    history, t = _strip_times(history)
    times.update(t)
    ckpt = save_checkpoint(out / CHECKPOINT_NAMES["track"], "track", model, model.cfg,
                           {"adapters": asdict(fcfg.adapters), "mode": mode})
    sections = track_eval(model, corpus, "val", cfg.refresh, with_oracle=False)
    emit_report(out, sections, {"history": history, "pretrain": pre_history, "mode": mode,
                                "n_samples": len(data), "checkpoint": ckpt.name})
    _finish(out, cfg, "finetune-track", seed, times)
    return {k: v.to_json() for k, v in sections.items()}


def track_cmd(cfg: RunConfig, clip_dir: Path, init: tuple[float, float, int], checkpoint: Path,
              seed: int, out: Path, refresh: int | None = 60, overlay: Path | None = None) -> dict:
    model, _ = load_checkpoint(checkpoint, "track")
    clip = load_clip(clip_dir)
    x, y, frame = init
    policy = RefreshPolicy(refresh, True) if refresh else RefreshPolicy(enabled=False)
    t0 = time.perf_counter()
    res = track_clip(clip, (int(frame), (float(x), float(y))), model, policy)
    elapsed = time.perf_counter() - t0
    rows = [(int(frame) + i, p[0], p[1], c) for i, (p, c) in enumerate(res)]
    csv_path = write_track_csv(out / "track.csv", rows)
    body = {"version": 1, "clip_id": clip.id, "init": {"frame": int(frame), "x": float(x), "y": float(y)},
            "refresh": refresh, "n_frames": len(rows), "csv": csv_path.name}
    labels_path = Path(clip_dir) / "labels.json"
    gt = None
    if labels_path.exists():
        human = {t: xy for t, xy in human_points(load_labels(clip_dir)).items() if t > frame}
        pred = {f: (px, py) for f, px, py, _ in rows}
        common = sorted(t for t in human if t in pred)
        if common:
            body["sparse"] = point_metrics([pred[t] for t in common], [human[t] for t in common],
                                           clip.diagonal).to_json()
        gt = human
    if overlay is not None:
        write_overlay(overlay, clip, {f: (px, py, c) for f, px, py, c in rows}, gt)
        body["overlay"] = Path(overlay).name
    write_json(out / "report.json", body)
    _finish(out, cfg, "track", seed, {"track_s": elapsed})
    return body


# --------------------------------------------------------------------------- end-to-end


def load_models(checkpoints: Path, onset: Path | None = None, detect: Path | None = None,
                track: Path | None = None) -> Models:
    paths = {"onset": onset, "detect": detect, "track": track}
    loaded = {}
    for kind, p in paths.items():
        loaded[kind], _ = load_checkpoint(p or Path(checkpoints) / CHECKPOINT_NAMES[kind], kind)
    return Models(loaded["onset"], loaded["detect"], loaded["track"])


def score_runs(runs: list[tuple[PipelineRun, ClipLabels, SynthGroundTruth | None, float]],
               cfg: RunConfig) -> dict[str, MetricsReport]:
    """Onset, detection and tracking metrics over pipeline runs. Tracking is scored from
    ``max(init frame, labelled onset)`` onwards, per annotated frame and per oracle frame."""
    mc = cfg.metric
    onset_p, onset_g = [], []
    det_p, det_g = [], []
    sp, sg, op, og, tags = [], [], [], [], []
    diag = None
    for run, labels, oracle, diagonal in runs:
        diag = diagonal
        t_gt = labels.onset_frame
        if t_gt is None:
            continue
        onset_p.append(run.onset.onset_frame if run.onset is not None else None)
        onset_g.append(t_gt)
        if run.detected_point is None:
            continue
        t_det = run.init[0]
        ref = labels.point_at(t_det)
        if ref is not None:
            det_g.append(ref.xy)
            det_p.append(run.detected_point)
        elif oracle is not None:
            det_g.append(tuple(oracle.source_track[t_det]))
            det_p.append(run.detected_point)
        human = human_points(labels)
        for f, x, y, _ in run.track:
            if f <= max(run.init[0], t_gt - 1):
                continue
            if f in human:
                sp.append((x, y))
                sg.append(human[f])
            if oracle is not None:
                op.append((x, y))
                og.append(tuple(oracle.source_track[f]))
                tags.append(oracle.scenario_tags[f])
    sections = {"onset": onset_metrics(onset_p, onset_g, mc) if onset_p else MetricsReport()}
    sections["detect"] = point_metrics(det_p, det_g, diag, mc) if det_p else MetricsReport()
    sections["track_sparse"] = point_metrics(sp, sg, diag, mc) if sp else MetricsReport()
    if op:
        dense = point_metrics(op, og, diag, mc)
        dense.scenarios = scenario_breakdown(op, og, tags, diag, mc)
        sections["track_oracle"] = dense
    return sections


def _frozen_baseline(runs, cfg: RunConfig) -> MetricsReport:
    """Every frame predicted at the tracking init point."""
    p, g, diag = [], [], None
    for run, labels, oracle, diagonal in runs:
        diag = diagonal
        if run.init is None or oracle is None:
            continue
        for f, *_ in run.track[1:]:
            p.append(run.init[1])
            g.append(tuple(oracle.source_track[f]))
    return point_metrics(p, g, diag, cfg.metric) if p else MetricsReport()


def _pipeline_cmd(command: str, mode: str, cfg: RunConfig, corpus_dir: Path, models: Models, seed: int,
                  out: Path, split: str = "test", overlays: bool = False) -> dict:
    corpus = open_corpus(corpus_dir, cfg.corpus.split_seed)
    runs, per_clip, timings = [], [], {}
    for cid in corpus.ids(split):
        clip, labels = corpus.clip(cid), corpus.labels(cid)
        oracle = corpus.oracle(cid) if (corpus.clip_dir(cid) / "oracle.json").exists() else None
        run = run_pipeline(clip, labels, mode, models, cfg.refresh)
        for k, v in run.timings.items():
            timings[k] = timings.get(k, 0.0) + v
        runs.append((run, labels, oracle, clip.diagonal))
        entry = run.to_json()
        entry.pop("track")
        entry["onset_gt"] = labels.onset_frame
        per_clip.append(entry)
        if run.track:
            write_track_csv(out / "tracks" / f"{cid}.csv", run.track)
        if overlays:
            gt = {t: tuple(oracle.source_track[t]) for t in range(len(clip))} if oracle else \
                {t: xy for t, xy in human_points(labels).items()}
            write_overlay(out / "overlays" / f"{cid}.avi", clip, {f: (x, y, c) for f, x, y, c in run.track}, gt)
    sections = score_runs(runs, cfg)
    sections["track_frozen_baseline"] = _frozen_baseline(runs, cfg)
    status = {"bleeding": sum(r.status == "bleeding" for r, *_ in runs),
              "non-bleeding": sum(r.status == "non-bleeding" for r, *_ in runs)}
    emit_report(out, sections, {"mode": mode, "split": split, "status": status, "clips": per_clip})
    _finish(out, cfg, command, seed, timings)
    return {k: v.to_json() for k, v in sections.items()}


def evaluate_cmd(cfg: RunConfig, corpus_dir: Path, models: Models, seed: int, out: Path,
                 split: str = "test", overlays: bool = False) -> dict:
    return _pipeline_cmd("evaluate", "evaluation", cfg, corpus_dir, models, seed, out, split, overlays)


def deploy_run_cmd(cfg: RunConfig, corpus_dir: Path, models: Models, seed: int, out: Path,
                   split: str = "test", overlays: bool = False) -> dict:
    return _pipeline_cmd("deploy-run", "deployment", cfg, corpus_dir, models, seed, out, split, overlays)


def untrained_models(cfg: RunConfig) -> Models:
    from .onset import OnsetDetector
    return Models(OnsetDetector(cfg.onset).eval(), SourceDetector().eval(), PointTrackerNet(cfg.tracker).eval())


def bench_efficiency_cmd(cfg: RunConfig, models: Models, seed: int, out: Path, width: int = 512,
                         height: int = 384, frames: int = 20, repeats: int = 3) -> dict:
    """Compute-only per-stage throughput plus an end-to-end run that includes decoding from disk.

    ``report.json`` holds the deterministic part (resolution, parameter counts);
    throughput, latency and memory live in ``timings.json``.
    """
    set_determinism(seed)
    length = max(frames + 2, models.onset.cfg.window_N + 2)
    scene = variant_config(SceneConfig(width=width, height=height, length=length, onset_frame=length // 3), seed)
    clip, gt = generate_scene(scene, "bench")
    eff = measure_efficiency(models, clip, frames, repeats)
    with tempfile.TemporaryDirectory() as tmp:
        d = save_clip(clip, tmp)
        t0 = time.perf_counter()
        loaded = load_clip(d)
        run_pipeline(loaded, None, "deployment", models, cfg.refresh)
        e2e = time.perf_counter() - t0
    body = {"version": 1, "resolution": eff["resolution"], "params": eff["params"], "frames": frames,
            "repeats": repeats, "stages": sorted(eff["stages"])}
    write_json(out / "report.json", body)
    echo_config(cfg, out, "bench-efficiency", seed)
    timing = {"stages": eff["stages"], "pipeline_compute": eff["pipeline"], "peak_rss_mb": eff["peak_rss_mb"],
              "end_to_end": {"seconds": e2e, "frames": len(clip), "fps": len(clip) / e2e}}
    write_json(out / "timings.json", timing)
    return {**body, "timings": timing}
