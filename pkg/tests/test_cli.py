"""Command-line front end: argument handling, exit codes, output files,
determinism, and the documented command examples."""

import os
import struct

import numpy as np
import pytest

from ppacnn import cli
from ppacnn import inference as inf
from ppacnn import network as nw
from ppacnn.core import read_pgm, write_pgm


def _write_idx(path, arr):
    """Big-endian IDX: 0x0000 0x08 ndim, one u32 per dimension, raster."""
    arr = np.asarray(arr, np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, 0x08, arr.ndim))
        for d in arr.shape:
            fh.write(struct.pack(">I", d))
        fh.write(arr.tobytes())


@pytest.fixture
def mini_mnist(tmp_path):
    """A 40-image IDX dataset directory, enough to exercise the loaders."""
    rng = np.random.default_rng(7)
    root = tmp_path / "mnist"
    root.mkdir()
    tr = rng.integers(0, 256, (40, 28, 28))
    te = rng.integers(0, 256, (10, 28, 28))
    _write_idx(root / "train-images-idx3-ubyte", tr)
    _write_idx(root / "train-labels-idx1-ubyte", rng.integers(0, 10, 40))
    _write_idx(root / "t10k-images-idx3-ubyte", te)
    _write_idx(root / "t10k-labels-idx1-ubyte", rng.integers(0, 10, 10))
    return str(root)


def _train_car(tmp_path, name="car.twnet", seed="3"):
    out = str(tmp_path / name)
    rc = cli.main(["train", "--task", "car", "--scenes", "8", "--epochs", "1",
                   "--batch", "4", "--seed", seed, "--out", out])
    assert rc == 0
    return out


# -- sweep parsing ------------------------------------------------------------------


def test_sweep_grid_is_inclusive():
    assert cli.parse_sweep("0:1:0.1") == tuple(round(0.1 * i, 9)
                                               for i in range(11))
    assert cli.parse_sweep("0:0.3:0.1") == (0.0, 0.1, 0.2, 0.3)
    assert cli.parse_sweep("0.5:0.5:0.25") == (0.5,)


@pytest.mark.parametrize("text", ["0:2:0.1", "-0.1:1:0.1", "0.8:0.2:0.1",
                                  "0:1:0", "0:1:-0.5", "0:1", "a:b:c"])
def test_sweep_rejects_bad_grids(text):
    with pytest.raises(cli.UsageError):
        cli.parse_sweep(text)


# -- training commands --------------------------------------------------------------


def test_train_car_writes_parsable_model(tmp_path):
    out = _train_car(tmp_path)
    model = nw.load_model(out)
    assert model.task == "car"
    assert model.fc_real.shape == (4096, 40)


def test_train_mnist_writes_parsable_model(tmp_path, mini_mnist):
    out = str(tmp_path / "m.twnet")
    rc = cli.main(["train", "--task", "mnist", "--data", mini_mnist,
                   "--epochs", "1", "--batch", "8", "--seed", "1",
                   "--out", out])
    assert rc == 0
    model = nw.load_model(out)
    assert model.conv_real.shape == (16, 5, 5)
    assert model.conv_real.min() >= -1.0 and model.conv_real.max() <= 1.0


def test_train_same_seed_is_byte_identical(tmp_path):
    a = _train_car(tmp_path, "a.twnet")
    b = _train_car(tmp_path, "b.twnet")
    assert open(a, "rb").read() == open(b, "rb").read()


def test_train_mnist_without_data_is_usage_error(tmp_path):
    rc = cli.main(["train", "--task", "mnist",
                   "--out", str(tmp_path / "m.twnet")])
    assert rc == 1


# -- freezing and inference ---------------------------------------------------------


def test_ternarize_writes_ternary_weights(tmp_path):
    model_path = _train_car(tmp_path)
    out = str(tmp_path / "car.twnett")
    rc = cli.main(["ternarize", "--model", model_path, "--alpha", "0.2",
                   "--out", out])
    assert rc == 0
    tern = inf.load_ternarized(out)
    assert set(np.unique(tern.conv)) <= {-1, 0, 1}


def test_ternarize_rejects_alpha_out_of_range(tmp_path):
    rc = cli.main(["ternarize", "--model", "whatever", "--alpha", "1.5",
                   "--out", str(tmp_path / "t")])
    assert rc == 1
    assert not (tmp_path / "t").exists()


def test_ternarize_is_idempotent(tmp_path):
    model_path = _train_car(tmp_path)
    a, b = str(tmp_path / "a.twnett"), str(tmp_path / "b.twnett")
    for out in (a, b):
        assert cli.main(["ternarize", "--model", model_path,
                         "--alpha", "0.4", "--out", out]) == 0
    assert open(a, "rb").read() == open(b, "rb").read()


def test_infer_black_frame_prints_zero_activations(tmp_path, capsys):
    model_path = _train_car(tmp_path)
    tern_path = str(tmp_path / "t.twnett")
    cli.main(["ternarize", "--model", model_path, "--alpha", "0.2",
              "--out", tern_path])
    pgm = str(tmp_path / "black.pgm")
    write_pgm(pgm, np.zeros((64, 64), np.uint8))
    rc = cli.main(["infer", "--model", tern_path, "--image", pgm])
    assert rc == 0
    out = capsys.readouterr().out
    acts_line = next(l for l in out.splitlines() if l.startswith("activations:"))
    assert all(float(v) == 0.0 for v in acts_line.split()[1:])
    assert "predicted bins: 0 0" in out


def test_infer_full_frame_goes_through_extraction(tmp_path, capsys):
    model_path = _train_car(tmp_path)
    tern_path = str(tmp_path / "t.twnett")
    cli.main(["ternarize", "--model", model_path, "--alpha", "0.2",
              "--out", tern_path])
    frame = np.full((256, 256), 20, np.uint8)
    frame[80:160, 80:160] = 220
    pgm = str(tmp_path / "frame.pgm")
    write_pgm(pgm, frame)
    rc = cli.main(["infer", "--model", tern_path, "--image", pgm])
    assert rc == 0
    assert "instructions:" in capsys.readouterr().out


def test_infer_rejects_odd_image_size(tmp_path):
    model_path = _train_car(tmp_path)
    tern_path = str(tmp_path / "t.twnett")
    cli.main(["ternarize", "--model", model_path, "--alpha", "0.2",
              "--out", tern_path])
    pgm = str(tmp_path / "odd.pgm")
    write_pgm(pgm, np.zeros((32, 32), np.uint8))
    assert cli.main(["infer", "--model", tern_path, "--image", pgm]) == 2


def test_infer_missing_model_is_data_error(tmp_path):
    pgm = str(tmp_path / "z.pgm")
    write_pgm(pgm, np.zeros((64, 64), np.uint8))
    rc = cli.main(["infer", "--model", str(tmp_path / "nope.twnett"),
                   "--image", pgm])
    assert rc == 2


# -- evaluation and scene generation -------------------------------------------------


def test_eval_sweep_csv(tmp_path, mini_mnist):
    out = str(tmp_path / "m.twnet")
    cli.main(["train", "--task", "mnist", "--data", mini_mnist,
              "--epochs", "1", "--batch", "8", "--seed", "1", "--out", out])
    csv = str(tmp_path / "sweep.csv")
    rc = cli.main(["eval", "--task", "mnist", "--model", out,
                   "--data", mini_mnist, "--alpha-sweep", "0:1:0.1",
                   "--limit", "3", "--out", csv])
    assert rc == 0
    lines = open(csv).read().splitlines()
    assert lines[0] == "alpha,metric,instructions_per_frame,fps_proxy"
    assert len(lines) == 12
    instr = [float(l.split(",")[2]) for l in lines[1:]]
    assert all(a >= b for a, b in zip(instr, instr[1:]))


def test_eval_car_deterministic_for_seed(tmp_path):
    model_path = _train_car(tmp_path)
    a, b = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
    for out in (a, b):
        rc = cli.main(["eval", "--task", "car", "--model", model_path,
                       "--alpha", "0.3", "--scenes", "2", "--seed", "5",
                       "--out", out])
        assert rc == 0
    assert open(a).read() == open(b).read()


def test_eval_task_model_mismatch_is_data_error(tmp_path, mini_mnist):
    model_path = _train_car(tmp_path)
    rc = cli.main(["eval", "--task", "mnist", "--model", model_path,
                   "--data", mini_mnist, "--alpha", "0.2",
                   "--out", str(tmp_path / "x.csv")])
    assert rc == 2
    assert not (tmp_path / "x.csv").exists()


def test_eval_needs_some_alpha(tmp_path, mini_mnist):
    rc = cli.main(["eval", "--task", "mnist", "--model", "m",
                   "--data", mini_mnist, "--out", str(tmp_path / "x.csv")])
    assert rc == 1


def test_gen_car_writes_scenes_and_targets(tmp_path):
    out_dir = str(tmp_path / "scenes")
    rc = cli.main(["gen-car", "--count", "3", "--seed", "9",
                   "--out-dir", out_dir])
    assert rc == 0
    for i in range(3):
        img = read_pgm(os.path.join(out_dir, "scene_%04d.pgm" % i))
        assert img.shape == (64, 64)
        assert set(np.unique(img)) <= {0, 255}
    rows = open(os.path.join(out_dir, "targets.csv")).read().splitlines()
    assert rows[0] == "index,bin_x,bin_y"
    assert len(rows) == 4
    for row in rows[1:]:
        _, bx, by = (int(v) for v in row.split(","))
        assert 0 <= bx < 20 and 0 <= by < 20


def test_gen_car_seed_env_fallback(tmp_path, monkeypatch):
    d1, d2 = str(tmp_path / "a"), str(tmp_path / "b")
    monkeypatch.setenv("PPACNN_SEED", "9")
    assert cli.main(["gen-car", "--count", "2", "--out-dir", d1]) == 0
    monkeypatch.delenv("PPACNN_SEED")
    assert cli.main(["gen-car", "--count", "2", "--seed", "9",
                     "--out-dir", d2]) == 0
    for name in ("scene_0000.pgm", "scene_0001.pgm", "targets.csv"):
        assert open(os.path.join(d1, name), "rb").read() == \
            open(os.path.join(d2, name), "rb").read()


# -- plane dumps --------------------------------------------------------------------


def test_dump_plane_writes_pgms(tmp_path):
    model_path = _train_car(tmp_path)
    tern_path = str(tmp_path / "t.twnett")
    cli.main(["ternarize", "--model", model_path, "--alpha", "0.2",
              "--out", tern_path])
    pgm = str(tmp_path / "z.pgm")
    write_pgm(pgm, np.zeros((64, 64), np.uint8))
    out_dir = str(tmp_path / "planes")
    rc = cli.main(["dump-plane", "--model", tern_path, "--image", pgm,
                   "--stage", "stored:2", "--out-dir", out_dir])
    assert rc == 0
    files = sorted(os.listdir(out_dir))
    assert len(files) == 20
    assert all(f.startswith("stored_2_") and f.endswith(".pgm")
               for f in files)
    read_pgm(os.path.join(out_dir, files[0]))


def test_dump_plane_rejects_unknown_stage(tmp_path):
    rc = cli.main(["dump-plane", "--model", "m", "--image", "i",
                   "--stage", "warp-core", "--out-dir", str(tmp_path / "d")])
    assert rc == 1
    assert not (tmp_path / "d").exists()


# -- top-level dispatch -------------------------------------------------------------


def test_unknown_command_is_usage_error(capsys):
    assert cli.main(["frobnicate"]) == 1
    capsys.readouterr()


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    capsys.readouterr()
