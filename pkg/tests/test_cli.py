import csv
import json
import subprocess
import sys

import pytest

from qmann.cli import main


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    d = tmp_path_factory.mktemp("runs")
    common = ["--task", "synthetic:single-fact", "--epochs", "2", "--n-train", "200", "--n-test", "100"]
    assert run("train", *common, "--out", d / "float") == 0
    assert run("train", *common, "--qformat", "Q5.2", "--out", d / "q52") == 0
    assert run("train", *common, "--qformat", "Q2.5", "--similarity", "hamming", "--mq", "--es",
               "--out", d / "qmann") == 0
    return d


def test_train_writes_artifacts(runs):
    for name in ("float", "q52", "qmann"):
        files = {p.name for p in (runs / name).iterdir()}
        assert {"config.json", "checkpoint.json", "metrics.jsonl", "curves.csv", "histograms.csv",
                "energy.json", "summary.json"} <= files
    lines = (runs / "q52" / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2]
    snap = json.loads((runs / "qmann" / "config.json").read_text())
    assert snap["train_config"]["similarity"] == "hamming" and snap["train_config"]["mq"]
    assert snap["code_version"]


def test_eval_reproduces_training_test_error(runs, capsys):
    for name in ("float", "q52", "qmann"):
        capsys.readouterr()
        assert run("eval", runs / name) == 0
        got = json.loads(capsys.readouterr().out)["error"]
        want = json.loads((runs / name / "summary.json").read_text())["final"]["test_err"]
        assert got == want


def test_energy_gain_over_15x(runs, capsys):
    assert run("energy", runs / "q52", "--baseline", runs / "float") == 0
    rep = json.loads((runs / "q52" / "energy_report.json").read_text())
    assert rep["gain_core"] > 15
    assert rep["run"]["unpriced"] == rep["baseline"]["unpriced"]


def test_diag(runs, capsys):
    assert run("diag", runs / "qmann") == 0
    out = json.loads(capsys.readouterr().out)
    assert out["overflow"]["similarity"] == 0
    assert (runs / "qmann" / "diag_histogram_test.csv").exists()


def test_sweep_rows_with_overflow_columns(tmp_path):
    assert run("sweep", "--task", "synthetic:single-fact", "--formats", "Q5.4,Q2.7", "--seeds", "0,1",
               "--epochs", "1", "--n-train", "100", "--n-test", "50", "--out", tmp_path) == 0
    rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    assert [r["format"] for r in rows] == ["Q5.4", "Q2.7"]
    assert {"best_err", "mean_err", "overflow_similarity"} <= set(rows[0])
    for r in rows:
        assert float(r["best_err"]) <= float(r["mean_err"])


@pytest.mark.parametrize(
    "args",
    [
        ["--task", "synthetic:single-fact", "--mode", "float", "--qformat", "Q5.2"],
        ["--task", "synthetic:single-fact", "--mode", "fixed"],
        ["--task", "synthetic:single-fact", "--similarity", "hamming"],
        ["--task", "synthetic:single-fact", "--qformat", "Z5.2"],
        ["--task", "synthetic:nope"],
        ["--task", "babi:0"],
        ["--task", "babi:1"],
        ["--task", "single-fact"],
    ],
)
def test_bad_flags_fail_before_work(tmp_path, monkeypatch, args):
    monkeypatch.delenv("QMANN_BABI_DIR", raising=False)
    out = tmp_path / "o"
    assert run("train", *args, "--out", out) == 2
    assert not out.exists()


def test_babi_dir_from_environment(tmp_path, monkeypatch):
    from qmann.data import gen_synthetic, serialize_babi

    sts = gen_synthetic("single-fact", 30, 0)
    (tmp_path / "qa1_x_train.txt").write_text(serialize_babi(sts))
    (tmp_path / "qa1_x_test.txt").write_text(serialize_babi(sts[:5]))
    monkeypatch.setenv("QMANN_BABI_DIR", str(tmp_path))
    assert run("train", "--task", "babi:1", "--epochs", "1", "--out", tmp_path / "r") == 0


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "qmann", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
