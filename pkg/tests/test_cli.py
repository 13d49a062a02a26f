import json

import numpy as np
import pytest
from PIL import Image

from endodepthl.cli import parse_size, run_cli
from endodepthl.trainer import TrainConfig


def run(capsys, *argv):
    code = run_cli([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert run_cli(["synth", "--frames", "6", "--geometry", "plane", "--out", str(d), "-q"]) == 0
    return d


def test_parse_size():
    assert parse_size("320x256") == (320, 256)
    for bad in ("320", "33x32", "axb", "0x16"):
        with pytest.raises(Exception):
            parse_size(bad)


def test_unknown_flag(capsys):
    code, out, err = run(capsys, "profile", "--bogus")
    assert code == 1 and out == ""
    assert "--bogus" in err and "usage" in err


def test_no_subcommand(capsys):
    assert run(capsys)[0] == 1


def test_bad_size_names_flag(capsys):
    code, _, err = run(capsys, "profile", "--input", "100x64")
    assert code == 1 and "--input" in err and "16" in err


def test_unknown_set_key(capsys, dataset):
    code, _, err = run(capsys, "train", "--data", dataset, "--set", "nope=1")
    assert code == 1 and "nope" in err


def test_missing_data_is_runtime_error(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--data", tmp_path / "absent")
    assert code == 2 and "absent" in err


def test_profile_json(capsys):
    code, out, _ = run(capsys, "profile", "--mode", "efficiency", "--input", "64x64", "--iters", "10",
                       "--warmup", "1", "--repeats", "1", "-q")
    assert code == 0
    rep = json.loads(out)
    assert rep["param_count"] == 957_421 and rep["flops"] > 0 and rep["fps"] > 0
    assert rep["input_shape"] == [1, 3, 64, 64]


def test_synth_train_eval(capsys, dataset, tmp_path):
    code, out, _ = run(capsys, "train", "--data", dataset, "--epochs", "1", "--out", tmp_path / "r",
                       "--set", "batch_size=2", "-q")
    assert code == 0
    summary = json.loads(out)
    assert (tmp_path / "r" / "final.ckpt").is_file()
    assert summary["steps"] == 2 and summary["config"]["batch_size"] == 2
    code, out, _ = run(capsys, "eval", "--data", dataset, "--checkpoint", tmp_path / "r" / "final.ckpt",
                       "--no-profile", "-q")
    assert code == 0
    rep = json.loads(out)
    assert set(rep) == {"accuracy", "accuracy_unscaled"}
    assert rep["accuracy"]["n_pixels"] == 4 * 64 * 64


def test_precedence(tmp_path, monkeypatch):
    from endodepthl.cli import build_config
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"epochs": 4, "lr0": 1e-3, "seed": 1}))
    cfg = build_config(TrainConfig, None, cfg_file, {}, {})
    assert (cfg.epochs, cfg.lr0, cfg.seed, cfg.batch_size) == (4, 1e-3, 1, 8)
    monkeypatch.setenv("ENDODEPTH_SEED", "9")
    cfg = build_config(TrainConfig, None, cfg_file, {"epochs": 2}, {"lr0": 2e-3})
    assert (cfg.epochs, cfg.lr0, cfg.seed) == (2, 2e-3, 9)
    cfg = build_config(TrainConfig, None, cfg_file, {"epochs": 2}, {"epochs": 7, "seed": 3})
    assert (cfg.epochs, cfg.seed) == (7, 3)


def test_mask_png(capsys, dataset, tmp_path):
    img = dataset / "sequence_000" / "frames" / "000002.png"
    code, out, _ = run(capsys, "mask", "--image", img, "--out", tmp_path, "-q")
    assert code == 0
    m = np.asarray(Image.open(tmp_path / "mask.png"))
    assert m.dtype == np.uint8 and m.shape == (64, 64)
    assert json.loads(out)["suppressed_fraction"] == pytest.approx((m < 128).mean(), abs=0.01)


def test_warp_pngs(capsys, dataset, tmp_path):
    code, out, _ = run(capsys, "warp", "--data", dataset, "--frame", "2", "--out", tmp_path, "-q")
    assert code == 0
    rep = json.loads(out)
    assert rep["mean_abs_error"] < 0.02
    assert np.asarray(Image.open(tmp_path / "reconstruction.png")).shape == (64, 64, 3)
    assert np.asarray(Image.open(tmp_path / "error.png")).dtype == np.uint8
    code, _, err = run(capsys, "warp", "--data", dataset, "--frame", "0", "--out", tmp_path)
    assert code == 2 and "--frame" in err


def test_byte_identical_outputs(capsys, tmp_path):
    for name in ("a", "b"):
        assert run(capsys, "synth", "--frames", "4", "--out", tmp_path / name, "-q")[0] == 0
        assert run(capsys, "train", "--data", tmp_path / name, "--epochs", "1", "--out", tmp_path / f"r{name}",
                   "--set", "batch_size=2", "-q")[0] == 0
    for rel in ("sequence_000/frames/000001.png", "sequence_000/depth/000002.png", "sequence_000/poses.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert (tmp_path / "ra" / "final.ckpt").read_bytes() == (tmp_path / "rb" / "final.ckpt").read_bytes()
