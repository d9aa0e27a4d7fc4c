import csv
import json

import pytest

from bleedtrack.checkpoint import load_checkpoint
from bleedtrack.cli import main, parse_adapters, parse_init
from bleedtrack.pseudo import load_dense_labels
from bleedtrack.report import count_video_frames

from cli_chain import COMMANDS, TINY


def _json(path):
    return json.loads(path.read_text())


def test_help_lists_every_command(capsys):
    assert main(["--help"]) == 0
    text = capsys.readouterr().out
    for cmd in COMMANDS:
        assert cmd in text


def test_every_command_writes_reports(cli_run):
    for cmd in COMMANDS:
        d = cli_run[cmd]
        assert (d / "report.json").exists() and (d / "timings.json").exists(), cmd
        echo = _json(d / "config.resolved.json")
        assert echo["command"] == cmd and echo["seed"] == 3
        assert echo["config"]["corpus"]["width"] == TINY["corpus"]["width"]


def test_synth_gen_layout(cli_run):
    d = cli_run["synth-gen"]
    manifest = _json(d / "manifest.json")
    assert len(manifest["clips"]) == 3
    for c in manifest["clips"]:
        clip_dir = d / c["dir"]
        assert (clip_dir / "labels.json").exists() and (clip_dir / "oracle.json").exists()
        assert len(list((clip_dir / "frames").iterdir())) == 50
    assert _json(d / "report.json")["split"]["counts"] == {"train": 1, "val": 1, "test": 1, "excluded": 0}


def test_checkpoints_load(cli_run):
    for kind, cmd in (("onset", "train-onset"), ("detect", "train-detect"), ("track", "finetune-track")):
        model, header = load_checkpoint(cli_run[cmd] / f"{kind}.ckpt", kind)
        assert header["kind"] == kind
    with pytest.raises(Exception):
        load_checkpoint(cli_run["train-onset"] / "onset.ckpt", "track")


def test_detect_outputs(cli_run):
    rep = _json(cli_run["detect-onset"] / "report.json")
    assert rep["status"] in ("bleeding", "non-bleeding") and rep["mode"] == "streaming"
    pt = _json(cli_run["detect-point"] / "report.json")
    assert 0 <= pt["x"] < 64 and 0 <= pt["y"] < 48
    assert (cli_run["detect-point"] / "heat.png").exists()


def test_pseudo_labels_written_for_train_clips(cli_run):
    rep = _json(cli_run["pseudo-label"] / "report.json")
    assert len(rep["clips"]) == 1
    cid = next(iter(rep["clips"]))
    dense = load_dense_labels(cli_run["synth-gen"] / cid)
    assert dense.clip_id == cid and dense.spans


def test_finetune_report(cli_run):
    rep = _json(cli_run["finetune-track"] / "report.json")
    assert rep["mode"] == "hybrid"
    assert "sparse" in rep and "train_time_s" not in json.dumps(rep)


def test_track_outputs(cli_run):
    d = cli_run["track"]
    rows = list(csv.DictReader(open(d / "track.csv")))
    assert len(rows) == 40 and rows[0]["frame"] == "10"
    assert (float(rows[0]["x"]), float(rows[0]["y"])) == (30.0, 20.0)
    assert count_video_frames(d / "overlay.avi") == 50


def test_pipeline_outputs(cli_run):
    ev = _json(cli_run["evaluate"] / "report.json")
    assert ev["mode"] == "evaluation" and ev["split"] == "test"
    assert {"onset", "detect", "track_sparse"} <= set(ev)
    assert list((cli_run["evaluate"] / "tracks").glob("*.csv"))
    assert list((cli_run["evaluate"] / "overlays").glob("*.avi"))
    dep = _json(cli_run["deploy-run"] / "report.json")
    assert dep["mode"] == "deployment"
    assert (cli_run["evaluate"] / "report.csv").exists()


def test_bench_report_split(cli_run):
    rep = _json(cli_run["bench-efficiency"] / "report.json")
    timings = _json(cli_run["bench-efficiency"] / "timings.json")
    assert "fps" not in json.dumps(rep)
    assert set(timings["stages"]) >= {"onset", "detect", "track"}
    assert rep["resolution"] == [64, 48]


def test_missing_checkpoint_is_an_error(cli_run, tmp_path):
    code = main(["--out", str(tmp_path), "evaluate", "--corpus", str(cli_run["synth-gen"]),
                 "--checkpoints", str(tmp_path)])
    assert code != 0


def test_corrupted_checkpoint_is_an_error(cli_run, tmp_path):
    bad = tmp_path / "onset.ckpt"
    bad.write_bytes(b"not a checkpoint")
    code = main(["--out", str(tmp_path / "o"), "detect-onset", "--clip",
                 str(next(p for p in cli_run["synth-gen"].iterdir() if p.is_dir())), "--checkpoint", str(bad)])
    assert code != 0


def test_unknown_config_key(tmp_path):
    code = main(["--out", str(tmp_path), "--set", "onset.nope=1", "synth-gen", "--patients", "1",
                 "--clips-per-patient", "1"])
    assert code == 2


def test_option_parsers():
    assert parse_adapters("rank=4,mode=adaptive_rank,alpha=8,targets=attention+mlp") == {
        "rank": 4, "mode": "adaptive_rank", "alpha": 8.0, "target_layers": ["attention", "mlp"]}
    assert parse_init("1.5,2,7") == (1.5, 2.0, 7)
    with pytest.raises(Exception):
        parse_init("1,2")
    with pytest.raises(Exception):
        parse_adapters("colour=red")
