import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from pointseg import checkpoint
from pointseg.cli import main
from pointseg.cloud import PointCloud, parse_kitti_labels, parse_ply, write_ply
from pointseg.experiments import toy_config
from pointseg.network import build_network

SMALL_CFG = """\
d_in = 3
n_class = 3
encoder_widths = 8, 16
input_width = 4
head_widths = 8, 8
k = 8
"""
TASK = ["--n-points", "128", "--train-scenes", "2", "--heldout-scenes", "1"]


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_CFG)
    return str(path)


@pytest.fixture
def trained(tmp_path, cfg_file):
    out = tmp_path / "run"
    assert main(["train", "--config", cfg_file, "--out-dir", str(out), "--epochs", "2", *TASK]) == 0
    return out


def manifest(path):
    return json.loads(open(path).read())


# -- bench -------------------------------------------------------------------

def test_bench_one_row(tmp_path):
    out = tmp_path / "r.csv"
    assert main(["bench", "--sizes", "1000", "--methods", "rs", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 1 and rows[0]["method"] == "RS" and rows[0]["status"] == "ok"
    m = manifest(str(out) + ".manifest.json")
    assert m["command"] == "bench" and m["outputs"] == [str(out)] and m["status"] == "ok"


def test_bench_unknown_method(tmp_path, capsys):
    assert main(["bench", "--methods", "nosuch", "--out", str(tmp_path / "r.csv")]) == 64
    assert "usage" in capsys.readouterr().err


def test_bench_timeout_exit_code(tmp_path):
    out = tmp_path / "r.csv"
    code = main(["bench", "--sizes", "100000", "--methods", "fps", "--time-budget", "0.01",
                 "--out", str(out)])
    assert code == 2
    assert list(csv.DictReader(open(out)))[0]["status"] == "timeout"
    assert manifest(str(out) + ".manifest.json")["status"] == "partial"


def test_bench_oom_exit_code(tmp_path):
    out = tmp_path / "r.csv"
    assert main(["bench", "--sizes", "1000", "--methods", "crs", "--memory-budget", "10",
                 "--out", str(out)]) == 2


def test_bad_flag_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["bench", "--frobnicate"])
    assert info.value.code == 64


# -- train / infer / eval ----------------------------------------------------

def test_train_outputs(trained):
    params, meta = checkpoint.load(trained / "model.ckpt")
    assert meta["config"]["encoder_widths"] == [8, 16]
    lines = (trained / "report.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [1, 2]
    assert set(json.loads(lines[0])) == {"epoch", "loss", "lr", "miou"}
    m = manifest(trained / "manifest.json")
    assert m["command"] == "train" and m["seeds"]["seed"] == 0


def test_train_is_reproducible(tmp_path, cfg_file, trained):
    again = tmp_path / "again"
    assert main(["train", "--config", cfg_file, "--out-dir", str(again), "--epochs", "2", *TASK]) == 0
    assert (again / "model.ckpt").read_bytes() == (trained / "model.ckpt").read_bytes()


def test_zero_epochs_checkpoint_is_init(tmp_path):
    out = tmp_path / "zero"
    assert main(["train", "--out-dir", str(out), "--epochs", "0", "--seed", "3", *TASK]) == 0
    params, _ = checkpoint.load(out / "model.ckpt")
    init = build_network(toy_config(3)).state_dict()
    assert set(params) == set(init)
    assert all(np.array_equal(params[k], init[k].astype(np.float64)) for k in init)


def test_train_bad_config(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("n_class = 1\n")
    assert main(["train", "--config", str(bad), "--out-dir", str(tmp_path / "o")]) == 66
    assert main(["train", "--config", str(tmp_path / "nope.cfg"), "--out-dir", str(tmp_path / "o")]) == 66


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(tmp_path, cfg_file):
    out = tmp_path / "div"
    assert main(["train", "--config", cfg_file, "--out-dir", str(out), "--epochs", "1",
                 "--lr", "inf", *TASK]) == 70
    m = manifest(out / "manifest.json")
    assert m["status"] == "diverged" and m["error"]


def test_infer_csv_and_label(tmp_path, trained):
    cloud = tmp_path / "scene.ply"
    assert main(["gen-scene", "--n-points", "200", "--seed", "4", "--out", str(cloud)]) == 0
    ckpt = str(trained / "model.ckpt")
    a, b, lab = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "a.label"
    assert main(["infer", "--checkpoint", ckpt, "--input", str(cloud), "--out", str(a)]) == 0
    assert main(["infer", "--checkpoint", ckpt, "--input", str(cloud), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = a.read_text().splitlines()
    assert rows[0] == "label" and len(rows) == 201
    assert main(["infer", "--checkpoint", ckpt, "--input", str(cloud), "--out", str(lab)]) == 0
    assert parse_kitti_labels(lab.read_bytes()).tolist() == [int(r) for r in rows[1:]]
    assert manifest(str(lab) + ".manifest.json")["command"] == "infer"


def test_infer_rgb_against_xyz_checkpoint(tmp_path, trained):
    rng = np.random.default_rng(0)
    path = tmp_path / "rgb.ply"
    path.write_bytes(write_ply(PointCloud(rng.random((64, 3)), rng.random((64, 3)))))
    code = main(["infer", "--checkpoint", str(trained / "model.ckpt"), "--input", str(path),
                 "--out", str(tmp_path / "o.csv")])
    assert code == 65


def test_infer_bad_inputs(tmp_path, trained):
    ckpt = str(trained / "model.ckpt")
    junk = tmp_path / "junk.ply"
    junk.write_bytes(b"not a ply\n")
    assert main(["infer", "--checkpoint", ckpt, "--input", str(junk), "--out", str(tmp_path / "o.csv")]) == 65
    assert main(["infer", "--checkpoint", ckpt, "--input", str(tmp_path / "missing.ply"),
                 "--out", str(tmp_path / "o.csv")]) == 66
    assert main(["infer", "--checkpoint", str(junk), "--input", str(junk),
                 "--out", str(tmp_path / "o.csv")]) == 65


def test_kitti_input(tmp_path, trained):
    scan = tmp_path / "scan.bin"
    assert main(["gen-scene", "--n-points", "100", "--out", str(scan)]) == 0
    assert (tmp_path / "scan.label").exists()
    # KITTI scans carry intensity (d_in 4), so an xyz checkpoint rejects them
    assert main(["infer", "--checkpoint", str(trained / "model.ckpt"), "--input", str(scan),
                 "--out", str(tmp_path / "o.csv")]) == 65


def test_eval(tmp_path, trained):
    out = tmp_path / "metrics.json"
    assert main(["eval", "--checkpoint", str(trained / "model.ckpt"), "--out", str(out), *TASK]) == 0
    m = json.loads(out.read_text())
    assert sum(map(sum, m["confusion"])) == 128
    assert 0 <= m["miou"] <= 1


def test_eval_on_files(tmp_path, trained):
    scene = tmp_path / "s.ply"
    assert main(["gen-scene", "--n-points", "150", "--seed", "9", "--out", str(scene)]) == 0
    out = tmp_path / "m.json"
    assert main(["eval", "--checkpoint", str(trained / "model.ckpt"), "--data", str(scene),
                 "--out", str(out)]) == 0
    assert sum(map(sum, json.loads(out.read_text())["confusion"])) == 150


# -- ablate / dump-attn / gen-scene ------------------------------------------

def test_ablate_appends_rows(tmp_path, cfg_file):
    out = tmp_path / "abl.csv"
    for name in ("full", "one_unit"):
        assert main(["ablate", name, "--config", cfg_file, "--epochs", "1", "--out", str(out), *TASK]) == 0
    rows = list(csv.DictReader(open(out)))
    assert [r["ablation"] for r in rows] == ["full", "one_unit"]
    assert manifest(str(out) + ".manifest.json")["config"]["units"] == 1


def test_ablate_unknown(tmp_path):
    assert main(["ablate", "no_such", "--out", str(tmp_path / "a.csv")]) == 64


def test_dump_attn(tmp_path, trained):
    out = tmp_path / "attn"
    assert main(["dump-attn", "--checkpoint", str(trained / "model.ckpt"), "--out-dir", str(out)]) == 0
    files = sorted(p.name for p in out.glob("layer*_W.csv"))
    assert files == ["layer0_W.csv", "layer1_W.csv"]
    w = np.loadtxt(out / "layer0_W.csv", delimiter=",")
    assert w.shape == (4, 4)  # last unit of an 8-wide block pools 2 * 2 channels
    assert (out / "manifest.json").exists()


def test_dump_attn_default_network(tmp_path):
    out = tmp_path / "attn"
    assert main(["dump-attn", "--out-dir", str(out)]) == 0
    assert len(list(out.glob("layer*_W.csv"))) == 4
    assert np.loadtxt(out / "layer0_W.csv", delimiter=",").shape == (8, 8)


def test_gen_scene_is_deterministic(tmp_path):
    a, b = tmp_path / "a.ply", tmp_path / "b.ply"
    for p in (a, b):
        assert main(["gen-scene", "--n-points", "300", "--seed", "2", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert parse_ply(a.read_bytes()).n == 300


def test_console_entry_point(tmp_path):
    out = tmp_path / "s.ply"
    res = subprocess.run([sys.executable, "-m", "pointseg.cli", "gen-scene", "--n-points", "50",
                          "--out", str(out)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    res = subprocess.run([sys.executable, "-m", "pointseg.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
