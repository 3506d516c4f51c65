import csv

import numpy as np
import pytest

from udet.checkpoint import save_checkpoint
from udet.cli import EXIT_CHECK, EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from udet.model import build
from udet.report import read_ppm
from udet.train import init_weights


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["-q", "synth", "--out", str(out), "--count", "6", "--size", "32", "--seed", "3",
                 "--min-radius", "2", "--max-radius", "4"]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    g = build("udet", 32, "1/8")
    init_weights(g, 0)
    path = tmp_path_factory.mktemp("ckpt") / "m.ckpt"
    save_checkpoint(g, path)
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_synth_count_zero_is_usage_error(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--count", "0"]) == EXIT_USAGE
    assert "count" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["params", "--bogus"], ["eval", "--data", "x", "--out", "y"]])
def test_usage_errors(argv):
    assert main(argv) == EXIT_USAGE


def test_synth_writes_pairs_manifest_and_stamp(phantom_dir):
    rows = _rows(phantom_dir / "manifest.csv")
    assert [r["id"] for r in rows] == [f"p{i:04d}" for i in range(6)]
    for r in rows:
        assert (phantom_dir / r["image_path"]).exists() and (phantom_dir / r["mask_path"]).exists()
    stamp = (phantom_dir / "stamp.txt").read_text()
    assert "seed = 3" in stamp and "version = " in stamp


def test_synth_is_byte_identical(tmp_path, phantom_dir):
    main(["-q", "synth", "--out", str(tmp_path), "--count", "6", "--size", "32", "--seed", "3",
          "--min-radius", "2", "--max-radius", "4"])
    for f in sorted(phantom_dir.iterdir()):
        assert (tmp_path / f.name).read_bytes() == f.read_bytes(), f.name


def test_params_udet_matches_table(capsys):
    assert main(["params", "--variant", "udet"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "28,584,193" in out and "MISMATCH" not in out


def test_params_other_variant_prints_counts(capsys):
    assert main(["params", "--variant", "unet", "--input-size", "64", "--width-scale", "1/4"]) == EXIT_OK
    assert "total" in capsys.readouterr().out


def test_eval_ground_truth_against_itself(tmp_path, phantom_dir):
    assert main(["-q", "eval", "--data", str(phantom_dir), "--pred", str(phantom_dir), "--out", str(tmp_path)]) == 0
    for r in _rows(tmp_path / "per_sample.csv"):
        assert float(r["dsc"]) == float(r["sen"]) == float(r["ppv"]) == 1.0
    hist = _rows(tmp_path / "dsc_histogram.csv")
    assert len(hist) == 10 and int(hist[-1]["count"]) == 6
    groups = {r["group"]: r for r in _rows(tmp_path / "stratified.csv")}
    assert int(groups["attached"]["n"]) + int(groups["non_attached"]["n"]) == 6
    assert "diameter_lt_6mm" in groups


def test_eval_with_checkpoint_is_reproducible(tmp_path, phantom_dir, checkpoint):
    outs = []
    for k in range(2):
        out = tmp_path / f"e{k}"
        assert main(["-q", "eval", "--data", str(phantom_dir), "--ckpt", str(checkpoint), "--out", str(out)]) == 0
        outs.append(out)
    for name in ("per_sample.csv", "aggregate.csv", "dsc_histogram.csv", "stratified.csv", "stamp.txt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_predict_writes_mask_and_overlay(tmp_path, phantom_dir, checkpoint):
    image = phantom_dir / "p0000_image.mhd"
    mask = phantom_dir / "p0000_mask.mhd"
    assert main(["-q", "predict", "--image", str(image), "--mask", str(mask), "--ckpt", str(checkpoint),
                 "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "p0000_pred.mhd").exists() and (tmp_path / "p0000_pred.raw").exists()
    assert read_ppm(tmp_path / "p0000_overlay.ppm").shape == (32, 32, 3)


def test_data_errors(tmp_path, phantom_dir, checkpoint):
    assert main(["eval", "--data", str(tmp_path / "missing"), "--pred", str(phantom_dir),
                 "--out", str(tmp_path / "o")]) == EXIT_DATA
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    assert main(["predict", "--image", str(phantom_dir / "p0000_image.mhd"), "--ckpt", str(tmp_path / "bad.ckpt"),
                 "--out", str(tmp_path / "o")]) == EXIT_DATA
    big = build("udet", 64, "1/8")
    save_checkpoint(big, tmp_path / "big.ckpt")
    assert main(["predict", "--image", str(phantom_dir / "p0000_image.mhd"), "--ckpt", str(tmp_path / "big.ckpt"),
                 "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_train_bad_config_is_data_error(tmp_path, phantom_dir):
    assert main(["-q", "train", "--data", str(phantom_dir), "--out", str(tmp_path),
                 "--set", "input_size=64"]) == EXIT_DATA
    assert main(["-q", "train", "--data", str(phantom_dir), "--out", str(tmp_path),
                 "--set", "no_such_field=1"]) == EXIT_DATA
    assert main(["-q", "train", "--data", str(phantom_dir), "--out", str(tmp_path),
                 "--set", "novalue"]) == EXIT_USAGE


def test_train_single_and_folds(tmp_path, phantom_dir):
    common = ["--set", "input_size=32", "--set", "width_scale=1/8", "--set", "max_epochs=1"]
    assert main(["-q", "train", "--data", str(phantom_dir), "--out", str(tmp_path / "one"),
                 "--folds", "1", *common]) == EXIT_OK
    assert (tmp_path / "one" / "model.ckpt").exists()
    assert main(["-q", "train", "--data", str(phantom_dir), "--out", str(tmp_path / "cv"),
                 "--folds", "2", *common]) == EXIT_OK
    assert (tmp_path / "cv" / "fold1.ckpt").exists()
    rows = _rows(tmp_path / "cv" / "metrics.csv")
    assert {r["fold"] for r in rows} == {"0", "1"}
    cfg = (tmp_path / "cv" / "config.txt").read_text()
    assert "max_epochs = 1" in cfg


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seeds", "1", "--skip-end-to-end"]) == EXIT_OK
    assert "19/19 gradient checks passed" in capsys.readouterr().out


def test_gradcheck_exit_code_on_failure(monkeypatch, capsys):
    from udet import gradsuite
    from udet.gradcheck import GradReport

    bad = gradsuite.SuiteResult("broken", 0, GradReport(errors=[1.0]), 0.0)
    monkeypatch.setattr(gradsuite, "run_suite", lambda seeds, end_to_end: [bad])
    assert main(["gradcheck"]) == EXIT_CHECK
    assert "broken" in capsys.readouterr().out


def test_thread_limit_env(monkeypatch):
    monkeypatch.setenv("UDET_THREADS", "1")
    assert main(["-q", "params", "--variant", "unet", "--input-size", "32", "--width-scale", "1/8"]) == EXIT_OK
