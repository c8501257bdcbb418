import json
import subprocess
import sys

import numpy as np
import pytest

from earlypred import cli
from earlypred.data import load_dataset, read_header
from earlypred.model import load_checkpoint
from earlypred.train import TrainLog

# every prefix is separable: no drift, no ambiguity, onset at the first segment
TOY = ["--c", "2", "--k", "4", "--d-raw", "6", "--n-train", "64", "--n-test", "16", "--alpha", "0",
       "--onset", "1", "1", "--sigma", "0.1", "--drift", "0", "--spacing", "2", "--seed", "0"]
SMALL = ["--d-feat", "8", "--d-hidden", "6", "--d-enc", "8", "--widths", "8", "8", "--batch", "16"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    assert run("gen-data", "--out", d, *TOY, "--modality", "both") == 0
    return d


@pytest.fixture(scope="module")
def trained(toy, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = run("train", "--data", toy, "--out", out, "--stage1-only", "--iters1", 200, "--lr1", 0.01, *SMALL)
    assert rc == 0
    return out


def test_gen_data_defaults(tmp_path):
    assert run("gen-data", "--out", tmp_path, "--n-train", 16, "--n-test", 8) == 0
    h = read_header(tmp_path / "train-a.eapd")
    assert (h["n_classes"], h["n_segments"], h["d_raw"], h["count"], h["seed"]) == (8, 10, 32, 16, 0)
    echo = json.loads((tmp_path / "config_gen-data.json").read_text())
    assert echo["spec"]["n_classes"] == 8 and echo["modalities"] == ["a"]


def test_gen_data_same_seed_same_bytes(tmp_path):
    for name in ("x", "y"):
        assert run("gen-data", "--out", tmp_path / name, *TOY) == 0
    for f in ("train-a.eapd", "test-a.eapd"):
        assert (tmp_path / "x" / f).read_bytes() == (tmp_path / "y" / f).read_bytes()


def test_gen_data_header_echoes_flags(toy):
    h = read_header(toy / "test-b.eapd")
    assert (h["n_classes"], h["n_segments"], h["d_raw"], h["count"]) == (2, 4, 6, 16)


def test_train_stage1_only_separable(trained):
    log = TrainLog.load(trained / "trainlog.csv")
    assert log.stage("stage1-eval")[-1]["acc"] == 1.0
    assert not log.stage("stage2")
    b = load_checkpoint(trained / "model.ckpt")
    assert b.variant == "full" and b.config["stage1_only"] is True
    assert json.loads((trained / "config_train.json").read_text())["train"]["iters1"] == 200
    assert (trained / "timing.json").exists()


@pytest.mark.parametrize("variant", ["scp", "lstm"])
def test_train_variant_selection(toy, tmp_path, variant):
    assert run("train", "--data", toy, "--out", tmp_path, "--variant", variant, "--stage1-only",
               "--iters1", 5, *SMALL) == 0
    assert load_checkpoint(tmp_path / "model.ckpt").variant == variant


def test_train_short_two_stage(toy, tmp_path):
    assert run("train", "--data", toy, "--out", tmp_path, "--iters1", 5, "--iters2", 4, "--d-steps", 2,
               *SMALL) == 0
    log = TrainLog.load(tmp_path / "trainlog.csv")
    assert len(log.stage("stage2")) == 4


def test_train_missing_dataset_exit_2(tmp_path, capsys):
    assert run("train", "--data", tmp_path / "nothing", "--out", tmp_path) == 2
    assert "not found" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_3(toy, tmp_path):
    assert run("train", "--data", toy, "--out", tmp_path, "--stage1-only", "--lr1", 1e9, "--iters1", 50,
               *SMALL) == 3


def test_unknown_flag_exit_1(capsys):
    assert run("train", "--bogus") == 1
    assert "usage:" in capsys.readouterr().err


def test_invalid_value_exit_1_or_2(tmp_path):
    assert run("gen-data", "--out", tmp_path, "--c", "x") == 1
    assert run("gen-data", "--out", tmp_path, "--alpha", 2.0) == 2


def test_eval_perfect_curve(toy, trained, tmp_path):
    assert run("eval", "--checkpoint", trained / "model.ckpt", "--test", toy / "test-a.eapd",
               "--out", tmp_path) == 0
    lines = (tmp_path / "eval_curve.csv").read_text().splitlines()
    assert len(lines) == 1 + 4
    assert [float(l.split(",")[1]) for l in lines[1:]] == [1.0] * 4
    assert (tmp_path / "eval_report.txt").exists() and (tmp_path / "config_eval.json").exists()


def test_eval_fuse(toy, trained, tmp_path):
    ck = trained / "model.ckpt"
    assert run("eval", "--checkpoint", ck, "--test", toy / "test-a.eapd", "--fuse", ck,
               "--fuse-test", toy / "test-b.eapd", "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "fused_report.json").read_text())
    assert rep["n_segments"] == 4
    assert run("eval", "--checkpoint", ck, "--test", toy / "test-a.eapd", "--fuse", ck) == 1


def test_eval_wrong_dimensions_exit_2(trained, tmp_path):
    assert run("gen-data", "--out", tmp_path, "--n-train", 2, "--n-test", 2) == 0
    assert run("eval", "--checkpoint", trained / "model.ckpt", "--test", tmp_path / "test-a.eapd",
               "--out", tmp_path) == 2


def test_report_dir_env(toy, trained, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.REPORT_DIR_ENV, str(tmp_path / "env-reports"))
    assert run("eval", "--checkpoint", trained / "model.ckpt", "--test", toy / "test-a.eapd") == 0
    assert (tmp_path / "env-reports" / "eval_curve.csv").exists()


def test_curve_reemits_file(toy, trained, tmp_path, capsys):
    run("eval", "--checkpoint", trained / "model.ckpt", "--test", toy / "test-a.eapd", "--out", tmp_path)
    capsys.readouterr()
    assert run("curve", "--report", tmp_path / "eval_report.json") == 0
    assert capsys.readouterr().out == (tmp_path / "eval_curve.csv").read_text()
    assert run("curve", "--report", tmp_path / "missing.json") == 2


def test_gradcheck_list(capsys):
    assert run("gradcheck", "--list") == 0
    names = capsys.readouterr().out.split()
    assert "lstm-stack" in names and "discriminator" in names and "perceptual" in names


def test_gradcheck_pass_and_injected_fault(tmp_path):
    assert run("gradcheck", "--components", "mlp", "lstm-cell", "--out", tmp_path) == 0
    assert "2/2 passed" in (tmp_path / "gradcheck.txt").read_text()
    assert run("gradcheck", "--components", "mlp", "--inject-fault", "--out", tmp_path) == 3
    assert run("gradcheck", "--components", "nope") == 1


def test_training_is_deterministic(toy, tmp_path):
    for name in ("a", "b"):
        assert run("train", "--data", toy, "--out", tmp_path / name, "--iters1", 10, "--iters2", 3,
                   *SMALL) == 0
        assert run("eval", "--checkpoint", tmp_path / name / "model.ckpt", "--test", toy / "test-a.eapd",
                   "--out", tmp_path / name) == 0
    for f in ("model.ckpt", "trainlog.csv", "eval_curve.csv", "eval_confusion.csv", "eval_report.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "earlypred.cli", "train", "--bogus"], capture_output=True, text=True)
    assert r.returncode == 1
    r = subprocess.run([sys.executable, "-m", "earlypred.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "earlypred" in r.stdout


def test_loaded_toy_shapes(toy):
    ds = load_dataset(toy / "train-a.eapd")
    assert ds.raw().shape == (64, 4, 6)
    assert np.bincount(ds.labels()).tolist() == [32, 32]
