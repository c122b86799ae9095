import json
import os
import subprocess
import sys

import numpy as np
import pytest

from longsiam import cli
from longsiam import model as M
from longsiam import nifti
from longsiam.cohort import load_cohort

TARGET = ["16", "16", "12"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", root / "raw", "--preset", "desk", "--seed", 3, "--n-stable", 7, "--n-decline", 7) == 0
    assert run("preprocess", "--manifest", root / "raw" / "manifest.csv", "--out", root / "pre", "--target", *TARGET) == 0
    (root / "cfg.json").write_text(json.dumps({"train": {"val_count": 10, "batch_size": 4}}))
    for name in ("train_a", "train_b"):
        assert run("train", "--manifest", root / "pre" / "manifest.csv", "--out", root / name,
                   "--config", root / "cfg.json", "--epochs", 2, "--runs", 2, "--seed", 5, "--deterministic",
                   "--threads", 1) == 0
    return root


def test_synth_layout_and_rerun_identical(pipeline, tmp_path):
    raw = pipeline / "raw"
    assert len(list(raw.glob("*.nii"))) == 28
    spec = json.loads((raw / "cohort_spec.json").read_text())
    assert spec["volume_shape"] == [32, 32, 24] and spec["seed"] == 3
    assert run("synth", "--out", tmp_path / "again", "--preset", "desk", "--seed", 3, "--n-stable", 7,
               "--n-decline", 7) == 0
    assert (tmp_path / "again" / "manifest.csv").read_bytes() == (raw / "manifest.csv").read_bytes()
    assert nifti.load(raw / "sub-0001_baseline.nii").shape == (32, 32, 24)


def test_synth_default_is_full_study_size(tmp_path):
    # the full preset is large; check the parsed arguments without writing volumes
    args = cli.build_parser().parse_args(["synth", "--out", str(tmp_path / "x"), "--seed", "7"])
    assert args.preset == "full" and args.seed == 7


def test_preprocess_outputs(pipeline, tmp_path):
    cohort = load_cohort(pipeline / "pre" / "manifest.csv")
    assert cohort.volume_shape == (16, 16, 12)
    for stack in (cohort.baseline, cohort.followup):
        assert stack.min() >= 0.0 and stack.max() <= 1.0
    assert json.loads((pipeline / "pre" / "config.json").read_text()) == {"target": [16, 16, 12], "align": "center"}
    # a second pass over processed data is a no-op up to rounding
    assert run("preprocess", "--manifest", pipeline / "pre" / "manifest.csv", "--out", tmp_path / "twice",
               "--target", *TARGET) == 0
    twice = load_cohort(tmp_path / "twice" / "manifest.csv")
    assert np.max(np.abs(twice.baseline - cohort.baseline)) < 1e-6
    assert np.max(np.abs(twice.followup - cohort.followup)) < 1e-6


def test_train_outputs_and_determinism(pipeline):
    a, b = pipeline / "train_a", pipeline / "train_b"
    names = sorted(p.name for p in a.iterdir())
    assert names == ["config.json", "mean_epochs.csv", "run_01.ckpt", "run_01_epochs.csv", "run_01_val_manifest.csv",
                     "run_02.ckpt", "run_02_epochs.csv", "run_02_val_manifest.csv", "summary.csv"]
    for name in names:
        if name != "config.json":
            assert (a / name).read_bytes() == (b / name).read_bytes(), name
    epochs = (a / "run_01_epochs.csv").read_text().splitlines()
    assert epochs[0] == "epoch,train_loss,val_loss,train_acc,val_acc,train_msle,val_msle" and len(epochs) == 3
    summary = (a / "summary.csv").read_text().splitlines()
    assert summary[0] == "split,mean_acc,mean_msle,std_acc,std_msle"
    assert [s.split(",")[0] for s in summary[1:]] == ["Training", "Validation"]
    cfg = json.loads((a / "config.json").read_text())
    assert cfg["train"]["epochs"] == 2 and cfg["train"]["val_count"] == 10 and cfg["model"]["seed"] == 5
    assert len(load_cohort(a / "run_01_val_manifest.csv")) == 10


def test_eval_reports_metrics(pipeline, tmp_path, capsys):
    ckpt = pipeline / "train_a" / "run_01.ckpt"
    assert run("eval", "--checkpoint", ckpt, "--manifest", pipeline / "pre" / "manifest.csv") == 0
    metrics = json.loads(capsys.readouterr().out)
    assert set(metrics) == {"accuracy", "msle", "crossentropy", "n"}
    assert metrics["n"] == 14 and 0 <= metrics["accuracy"] <= 1 and metrics["msle"] >= 0
    out = tmp_path / "m.json"
    assert run("eval", "--checkpoint", ckpt, "--manifest", pipeline / "pre" / "manifest.csv", "--out", out) == 0
    assert json.loads(out.read_text()) == metrics


def test_malformed_manifest_fails_cleanly(pipeline, tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("subject_id,baseline_path\nx,y\n")
    ckpt = pipeline / "train_a" / "run_01.ckpt"
    assert run("eval", "--checkpoint", ckpt, "--manifest", bad, "--out", tmp_path / "m.json") == 1
    assert run("preprocess", "--manifest", bad, "--out", tmp_path / "p") == 1
    assert run("embed", "--checkpoint", ckpt, "--manifest", bad, "--out", tmp_path / "e") == 1
    assert "longsiam: error:" in capsys.readouterr().err
    assert sorted(p.name for p in tmp_path.iterdir()) == ["bad.csv"]


def test_failure_midway_leaves_no_output(pipeline, tmp_path):
    # the second pair's follow-up is missing, so preprocessing fails after writing the first pair
    lines = (pipeline / "raw" / "manifest.csv").read_text().splitlines()[:3]
    raw = pipeline / "raw"
    rows = [lines[0]] + [",".join(str(raw / c) if c.endswith(".nii") else c for c in l.split(",")) for l in lines[1:]]
    rows[2] = rows[2].replace("followup.nii", "missing.nii")
    (tmp_path / "m.csv").write_text("\n".join(rows) + "\n")
    assert run("preprocess", "--manifest", tmp_path / "m.csv", "--out", tmp_path / "out", "--target", *TARGET) == 1
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.csv"]


def test_refuses_non_empty_output(pipeline):
    assert run("synth", "--out", pipeline / "raw", "--preset", "desk", "--n-stable", 1, "--n-decline", 1) == 1


def test_embed_outputs(pipeline, tmp_path):
    ckpt = pipeline / "train_a" / "run_01.ckpt"
    manifest = pipeline / "pre" / "manifest.csv"
    for name in ("e1", "e2"):
        assert run("embed", "--checkpoint", ckpt, "--manifest", manifest, "--out", tmp_path / name,
                   "--seed", 4, "--iterations", 150) == 0
    csvs = sorted(p.name for p in (tmp_path / "e1").glob("*.csv"))
    assert csvs == sorted(f"{s}.csv" for s in M.STAGES) and len(csvs) == 4
    for name in csvs:
        text = (tmp_path / "e1" / name).read_text()
        assert text == (tmp_path / "e2" / name).read_text()
        lines = text.splitlines()
        assert lines[0] == "x,y,label,predicted,correct" and len(lines) == 1 + 14


def test_bad_config_and_threads(pipeline, tmp_path, monkeypatch):
    (tmp_path / "c.json").write_text(json.dumps({"optimizer": {}}))
    assert run("train", "--manifest", pipeline / "pre" / "manifest.csv", "--out", tmp_path / "t",
               "--config", tmp_path / "c.json") == 1
    (tmp_path / "c.json").write_text(json.dumps({"train": {"lr": 1}}))
    assert run("train", "--manifest", pipeline / "pre" / "manifest.csv", "--out", tmp_path / "t",
               "--config", tmp_path / "c.json") == 1
    assert not (tmp_path / "t").exists()
    monkeypatch.setenv(cli.THREADS_ENV, "3")
    assert cli.resolve_threads(None) == 3 and cli.resolve_threads(2) == 2
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    with pytest.raises(cli.CliError):
        cli.resolve_threads(None)
    monkeypatch.delenv(cli.THREADS_ENV)
    assert cli.resolve_threads(None) == (os.cpu_count() or 1)


def test_module_entry_point_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "longsiam", "--help"], capture_output=True, text=True)
    assert ok.returncode == 0 and "synth" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "longsiam", "eval", "--checkpoint", str(tmp_path / "no.ckpt"),
                          "--manifest", str(tmp_path / "no.csv")], capture_output=True, text=True)
    assert bad.returncode == 1 and "longsiam: error:" in bad.stderr
