import csv
import json

import numpy as np
import pytest

from flatmtl.cli import main
from flatmtl.idx import read_idx, write_idx

TRAIN = ["train", "--problem", "two_valley", "--method", "f-mean", "--rho", "0.5", "--seed", "7", "--epochs", "3",
         "--steps-per-epoch", "20", "--lr", "0.01"]


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture
def run(tmp_path, monkeypatch):
    monkeypatch.setenv("FLATMTL_THREADS", "1")
    out = tmp_path / "runs" / "a"
    assert main(TRAIN + ["--out", str(out)]) == 0
    return out


def test_train_populates_run_dir(run):
    for name in ("log.csv", "summary.json", "checkpoint.npz", "config.json"):
        assert (run / name).is_file()
    s = json.loads((run / "summary.json").read_text())
    assert s["experiment"]["method"] == "f-mean" and s["steps"] == 60
    assert s["config"]["flat_enabled"] is True


def test_same_flags_give_same_summary(run, tmp_path):
    other = tmp_path / "runs" / "b"
    assert main(TRAIN + ["--out", str(other), "--run-id", "a"]) == 0
    a = json.loads((run / "summary.json").read_text())
    b = json.loads((other / "summary.json").read_text())
    for s in (a, b):
        s.pop("wall_s")
        s["experiment"].pop("out")
    assert a == b
    assert (run / "log.csv").read_bytes() == (other / "log.csv").read_bytes()


def test_reusing_out_dir_needs_force(run, capsys):
    assert main(TRAIN + ["--out", str(run)]) == 2
    assert _err(capsys)["exit_code"] == 2
    assert main(TRAIN + ["--out", str(run), "--force"]) == 0


def test_invalid_cagrad_c(tmp_path, capsys):
    code = main(["train", "--method", "cagrad", "--cagrad-c", "1.5", "--out", str(tmp_path / "x")])
    assert code == 2
    err = _err(capsys)
    assert err["error"] == "config" and "[0, 1)" in err["message"]


def test_config_file_and_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"problem": "quadratic_moo", "method": "pcgrad", "epochs": 2, "lr": 0.1}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "q")]) == 0
    s = json.loads((tmp_path / "q" / "summary.json").read_text())
    assert s["config"]["method"]["name"] == "pcgrad" and s["config"]["flat_enabled"] is False
    cfg.write_text(json.dumps({"colour": "red"}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2
    assert "colour" in _err(capsys)["message"]


def test_summary_can_seed_a_new_run(run, tmp_path):
    assert main(["train", "--config", str(run / "summary.json"), "--out", str(tmp_path / "again")]) == 0
    a = (run / "log.csv").read_bytes()
    assert (tmp_path / "again" / "log.csv").read_bytes() == a


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path, capsys):
    code = main(["train", "--problem", "quadratic_moo", "--method", "mean", "--lr", "1e6", "--epochs", "200",
                 "--out", str(tmp_path / "d")])
    assert code == 3 and _err(capsys)["error"] == "numeric"
    assert (tmp_path / "d" / "divergence.json").is_file()


def test_resume(run, tmp_path):
    assert main(TRAIN[:-4] + ["--steps-per-epoch", "20", "--lr", "0.01", "--epochs", "5", "--out", str(run),
                              "--resume", str(run / "checkpoint.npz")]) == 0
    s = json.loads((run / "summary.json").read_text())
    assert s["steps"] == 100


def test_analyze_measures(run):
    out = run / "analysis"
    assert main(["analyze", "--run", str(run), "--measure", "sharpness", "--rho", "0.1"]) == 0
    rows = list(csv.DictReader(open(out / "a_sharpness_all.csv")))
    assert [r["task"] for r in rows] == ["0", "1"] and float(rows[0]["sharpness"]) > 0
    assert main(["analyze", "--run", str(run), "--measure", "surface", "--resolution", "41", "--extent", "1.0"]) == 0
    for t in (0, 1):
        grid = np.loadtxt(out / f"a_surface_{t}.csv", delimiter=",")
        assert grid.shape == (41, 41)
    assert main(["analyze", "--run", str(run), "--measure", "probe", "--radii", "0,10,100"]) == 0
    rows = list(csv.DictReader(open(out / "a_probe_all.csv")))
    s = json.loads((run / "summary.json").read_text())
    assert len(rows) == 3
    assert [float(rows[0]["task0_mean"]), float(rows[0]["task1_mean"])] == s["final_metrics"]
    report = json.loads((out / "a_analysis.json").read_text())
    assert "probe" in report


def test_analyze_errors(run, tmp_path, capsys):
    assert main(["analyze", "--checkpoint", str(tmp_path / "missing.npz")]) == 4
    assert _err(capsys)["exit_code"] == 4
    assert main(["analyze", "--run", str(run), "--measure", "hessian"]) == 2
    assert main(["analyze", "--run", str(run), "--task", "5"]) == 2


def test_compare(run, tmp_path, capsys):
    s = json.loads((run / "summary.json").read_text())
    base = tmp_path / "base.json"
    base.write_text(json.dumps({"metrics": s["final_metrics"]}))
    out_csv = tmp_path / "cmp.csv"
    assert main(["compare", str(run), "--baselines", str(base), "--out", str(out_csv)]) == 0
    assert "f-mean" in capsys.readouterr().out
    rows = list(csv.DictReader(open(out_csv)))
    assert float(rows[0]["delta_m_pct"]) == 0.0
    assert main(["compare", str(run), "--baselines", str(tmp_path / "none.json")]) == 2
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "summary.json").write_text("{not json")
    assert main(["compare", str(bad), "--baselines", str(base)]) == 4


def test_datagen(tmp_path):
    r = np.random.default_rng(0)
    write_idx(tmp_path / "img.idx", r.integers(0, 256, (10, 28, 28)).astype(np.uint8))
    write_idx(tmp_path / "lab.idx", r.integers(0, 10, 10).astype(np.uint8))
    args = ["datagen", "--images-a", str(tmp_path / "img.idx"), "--labels-a", str(tmp_path / "lab.idx"),
            "--n-pairs", "16", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "g1")]) == 0
    assert main(args + ["--out", str(tmp_path / "g2")]) == 0
    for name in ("images.idx", "labels_task1.idx", "labels_task2.idx", "meta.json"):
        assert (tmp_path / "g1" / name).read_bytes() == (tmp_path / "g2" / name).read_bytes()
    assert read_idx(tmp_path / "g1" / "images.idx").dims == (16, 36, 36)
    meta = json.loads((tmp_path / "g1" / "meta.json").read_text())
    assert meta["overlap_policy"] == "elementwise_max" and meta["seed"] == 3


def test_datagen_errors(tmp_path, capsys):
    assert main(["datagen", "--images-a", str(tmp_path / "no.idx"), "--labels-a", "x", "--out",
                 str(tmp_path / "o")]) == 4
    (tmp_path / "junk.idx").write_bytes(b"\x01\x02\x03\x04")
    assert main(["datagen", "--images-a", str(tmp_path / "junk.idx"), "--labels-a", str(tmp_path / "junk.idx"),
                 "--out", str(tmp_path / "o")]) == 4
    assert "bad magic" in _err(capsys)["message"]


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(["train", "--epochs", "abc"]) == 2
    assert main(["train", "--problem", "two_valley"]) == 2
