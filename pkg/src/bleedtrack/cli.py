"""Command-line entry point: ``bleedtrack [--seed S] [--config PATH] [--out DIR] <command> ...``."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import workflows as wf
from .config import load_config
from .checkpoint import CheckpointError

log = logging.getLogger("bleedtrack")


def _overrides(pairs: tuple[str, ...]) -> dict:
    out = {}
    for item in pairs:
        key, sep, raw = item.partition("=")
        if not sep:
            raise click.BadParameter(f"expected key=value, got {item!r}", param_hint="--set")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def parse_adapters(text: str) -> dict:
    """``rank=4,mode=adaptive_rank,targets=attention+mlp`` -> AdapterConfig field overrides."""
    fields = {}
    for part in filter(None, text.split(",")):
        key, sep, val = part.partition("=")
        if not sep:
            raise click.BadParameter(f"bad adapter option {part!r}", param_hint="--adapters")
        if key == "rank":
            fields["rank"] = int(val)
        elif key == "mode":
            fields["mode"] = val
        elif key == "alpha":
            fields["alpha"] = float(val)
        elif key == "targets":
            fields["target_layers"] = list(val.split("+"))
        else:
            raise click.BadParameter(f"unknown adapter option {key!r}", param_hint="--adapters")
    return fields


def parse_init(text: str) -> tuple[float, float, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise click.BadParameter("expected x,y,frame", param_hint="--init")
    try:
        return float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="--init") from exc


class Ctx:
    def __init__(self, seed: int, config: Path | None, out: Path, overrides: dict):
        self.seed = seed
        self.config_path = config
        self.overrides = overrides
        self.out = out

    def cfg(self, extra: dict | None = None):
        return load_config(self.config_path, {**self.overrides, **(extra or {})})

    def out_dir(self) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out


pass_ctx = click.make_pass_decorator(Ctx)


@click.group()
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for every random choice.")
@click.option("--config", "config", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="JSON run configuration.")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=Path("runs/latest"),
              show_default=True, help="Output directory.")
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="Dotted config override, e.g. onset.window_N=17.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def cli(ctx, seed, config, out, sets, verbose):
    """Bleeding onset detection, source localization and point tracking."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    wf.set_determinism(seed)
    ctx.obj = Ctx(seed, config, out, _overrides(sets))


@cli.command("synth-gen")
@click.option("--patients", type=int, required=True)
@click.option("--clips-per-patient", type=int, required=True)
@click.option("--preset", type=click.Choice(["easy", "moderate", "hard"]), default=None)
@pass_ctx
def synth_gen(c: Ctx, patients, clips_per_patient, preset):
    """Write a synthetic corpus with sparse labels and oracle tracks."""
    rep = wf.synth_gen(c.cfg(), patients, clips_per_patient, c.seed, c.out_dir(), preset)
    click.echo(f"wrote {rep['n_clips']} clips to {c.out}")


@cli.command("train-onset")
@click.option("--corpus", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--epochs", type=int, default=None)
@pass_ctx
def train_onset(c: Ctx, corpus, epochs):
    """Train the onset gate and window head on the corpus train split."""
    rep = wf.train_onset_cmd(c.cfg(), corpus, c.seed, c.out_dir(), epochs)
    click.echo(f"val accuracy @8 frames: {rep['frame_acc'].get('8')}")


@cli.command("detect-onset")
@click.option("--clip", "clip_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--mode", type=click.Choice(["offline", "streaming"]), default="offline", show_default=True)
@pass_ctx
def detect_onset(c: Ctx, clip_dir, checkpoint, mode):
    """Predict the onset frame of one clip."""
    rep = wf.detect_onset_cmd(c.cfg(), clip_dir, checkpoint, mode, c.seed, c.out_dir())
    click.echo(f"{rep['clip_id']}: {rep['status']} onset={rep['onset_frame']}")


@cli.command("train-detect")
@click.option("--corpus", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--epochs", type=int, default=None)
@pass_ctx
def train_detect(c: Ctx, corpus, epochs):
    """Train the source-point detector."""
    rep = wf.train_detect_cmd(c.cfg(), corpus, c.seed, c.out_dir(), epochs)
    click.echo(f"val mean error: {rep['err_avg_px']} px")


@cli.command("detect-point")
@click.option("--frame", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--emit-heatmap", "heatmap", type=click.Path(dir_okay=False, path_type=Path), default=None)
@pass_ctx
def detect_point(c: Ctx, frame, checkpoint, heatmap):
    """Locate the bleeding source in a single image."""
    rep = wf.detect_point_cmd(c.cfg(), frame, checkpoint, c.seed, c.out_dir(), heatmap)
    click.echo(f"source at ({rep['x']}, {rep['y']})")


@cli.command("pseudo-label")
@click.option("--corpus", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--tracker", "tracker", default="lk", show_default=True, help="lk or model.")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Tracker checkpoint for --tracker model.")
@pass_ctx
def pseudo_label(c: Ctx, corpus, tracker, checkpoint):
    """Write pseudo_labels.json for every training clip."""
    rep = wf.pseudo_label_cmd(c.cfg(), corpus, tracker, c.seed, c.out_dir(), checkpoint)
    click.echo(f"labelled {len(rep['clips'])} clips")


@cli.command("finetune-track")
@click.option("--corpus", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--adapters", default="rank=4", show_default=True, help="e.g. rank=4,mode=adaptive_rank")
@click.option("--mode", type=click.Choice(["short", "long", "hybrid"]), default="hybrid", show_default=True)
@click.option("--base", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Pretrained tracker checkpoint; pretrains on fresh synthetic scenes when omitted.")
@pass_ctx
def finetune_track(c: Ctx, corpus, adapters, mode, base):
    """Adapter fine-tuning of the point tracker."""
    ad = parse_adapters(adapters)
    cfg = c.cfg({f"finetune.adapters.{k}": v for k, v in ad.items()})
    rep = wf.finetune_track_cmd(cfg, corpus, mode, c.seed, c.out_dir(), base)
    click.echo(f"val sparse mean error: {rep['sparse']['err_avg_px']} px")


@cli.command("track")
@click.option("--clip", "clip_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--init", "init", required=True, help="x,y,frame")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--refresh", type=int, default=60, show_default=True, help="Refresh interval; 0 disables.")
@click.option("--emit-overlay", "overlay", type=click.Path(dir_okay=False, path_type=Path), default=None)
@pass_ctx
def track(c: Ctx, clip_dir, init, checkpoint, refresh, overlay):
    """Track one point through a clip and write per-frame CSV."""
    rep = wf.track_cmd(c.cfg(), clip_dir, parse_init(init), checkpoint, c.seed, c.out_dir(), refresh, overlay)
    click.echo(f"tracked {rep['n_frames']} frames -> {c.out / rep['csv']}")


def _models(checkpoints, onset, detect, tracker):
    try:
        return wf.load_models(checkpoints, onset, detect, tracker)
    except CheckpointError as exc:
        raise click.ClickException(str(exc)) from exc


def _pipeline_options(f):
    f = click.option("--overlays", is_flag=True, help="Write one overlay video per clip.")(f)
    f = click.option("--split", type=click.Choice(["train", "val", "test"]), default="test", show_default=True)(f)
    f = click.option("--track-checkpoint", type=click.Path(dir_okay=False, path_type=Path), default=None)(f)
    f = click.option("--detect-checkpoint", type=click.Path(dir_okay=False, path_type=Path), default=None)(f)
    f = click.option("--onset-checkpoint", type=click.Path(dir_okay=False, path_type=Path), default=None)(f)
    f = click.option("--checkpoints", type=click.Path(file_okay=False, path_type=Path), default=Path("."),
                     show_default=True, help="Directory holding onset.ckpt, detect.ckpt and track.ckpt.")(f)
    f = click.option("--corpus", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)(f)
    return f


@cli.command("evaluate")
@_pipeline_options
@pass_ctx
def evaluate(c: Ctx, corpus, checkpoints, onset_checkpoint, detect_checkpoint, track_checkpoint, split, overlays):
    """Evaluation mode: detection and tracking start from the labelled onset."""
    models = _models(checkpoints, onset_checkpoint, detect_checkpoint, track_checkpoint)
    rep = wf.evaluate_cmd(c.cfg(), corpus, models, c.seed, c.out_dir(), split, overlays)
    click.echo(f"onset acc@8 {rep['onset']['frame_acc'].get('8')}; "
               f"tracking acc@100 {rep['track_oracle']['point_acc'].get('100') if 'track_oracle' in rep else None}")


@cli.command("deploy-run")
@_pipeline_options
@pass_ctx
def deploy_run(c: Ctx, corpus, checkpoints, onset_checkpoint, detect_checkpoint, track_checkpoint, split, overlays):
    """Deployment mode: streaming onset drives detection and tracking."""
    models = _models(checkpoints, onset_checkpoint, detect_checkpoint, track_checkpoint)
    rep = wf.deploy_run_cmd(c.cfg(), corpus, models, c.seed, c.out_dir(), split, overlays)
    click.echo(f"onset acc@8 {rep['onset']['frame_acc'].get('8')}")


@cli.command("bench-efficiency")
@click.option("--checkpoints", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Checkpoint directory; untrained models are measured when omitted.")
@click.option("--width", type=int, default=512, show_default=True)
@click.option("--height", type=int, default=384, show_default=True)
@click.option("--frames", type=int, default=20, show_default=True)
@click.option("--repeats", type=int, default=3, show_default=True)
@pass_ctx
def bench_efficiency(c: Ctx, checkpoints, width, height, frames, repeats):
    """Per-stage throughput, latency, parameter counts and peak memory."""
    cfg = c.cfg()
    models = _models(checkpoints, None, None, None) if checkpoints else wf.untrained_models(cfg)
    rep = wf.bench_efficiency_cmd(cfg, models, c.seed, c.out_dir(), width, height, frames, repeats)
    for name, s in rep["timings"]["stages"].items():
        click.echo(f"{name:7s} {s['fps']:8.1f} fps {s['latency_ms']:8.2f} ms")


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, prog_name="bleedtrack", standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        return 1
    except (ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
