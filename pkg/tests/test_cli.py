import json
import subprocess
import sys

import pytest

from cardiometa.cli import main

from conftest import WINDKESSEL


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "wk.net").write_text(WINDKESSEL)
    return d


@pytest.fixture(scope="module")
def dataset(workdir):
    path = workdir / "wk.csv"
    assert main(["dataset", str(workdir / "wk.net"), "--design", "sobol", "--n", "64", "--out", str(path)]) == 0
    return path


def test_simulate_prints_biomarkers(workdir, capsys):
    out = workdir / "sim"
    assert main(["simulate", str(workdir / "wk.net"), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "MAP" in text and "P_sys" in text
    assert (out / "biomarkers.txt").read_text().startswith("# cardiometa simulate")
    assert (out / "trajectory.csv").exists()


def test_missing_file_exit_4(workdir, capsys):
    assert main(["simulate", str(workdir / "nope.net"), "--out", str(workdir / "x")]) == 4
    assert "nope.net" in capsys.readouterr().err


def test_duplicate_flag_exit_2(workdir):
    assert main(["simulate", str(workdir / "wk.net"), "--dt", "1e-3", "--dt", "2e-3"]) == 2


def test_bad_netlist_exit_2(workdir):
    bad = workdir / "bad.net"
    bad.write_text(WINDKESSEL.replace("gnd ref", "gnd"))
    assert main(["simulate", str(bad), "--out", str(workdir / "b")]) == 2


def test_dataset_rerun_byte_identical(workdir, dataset):
    again = workdir / "wk2.csv"
    assert main(["dataset", str(workdir / "wk.net"), "--design", "sobol", "--n", "64", "--out", str(again)]) == 0
    assert dataset.read_bytes() == again.read_bytes()


def test_train_evaluate_analyse_chain(workdir, dataset, capsys):
    model = workdir / "pce.json"
    assert main(["train", str(dataset), "--emulator", "pce", "--param", "degree=2", "--out", str(model)]) == 0
    meta = json.loads(model.read_text())["metadata"]
    assert meta["command"] == "train" and len(meta["config_hash"]) == 16 and len(meta["dataset_sha256"]) == 64
    assert main(["evaluate", str(model), str(dataset), "--out", str(workdir / "ev")]) == 0
    rows = (workdir / "ev" / "metrics.csv").read_text().splitlines()
    assert rows[0].startswith("# ") and rows[1] == "output,q2,max_rel_error" and len(rows) == 5
    for method in ("mc", "pce"):
        out = workdir / f"sobol-{method}"
        assert main(["sobol", str(model), "--method", method, "--n", "256", "--out", str(out)]) == 0
        assert (out / "sobol.csv").exists()
    first = (workdir / "sobol-mc" / "sobol.csv").read_bytes()
    assert main(["sobol", str(model), "--n", "256", "--out", str(workdir / "sobol-mc")]) == 0
    assert (workdir / "sobol-mc" / "sobol.csv").read_bytes() == first
    assert main(["morris", str(model), "--r", "8", "--levels", "4", "--out", str(workdir / "mo")]) == 0
    assert (workdir / "mo" / "morris.csv").exists()


def test_estimate_with_ffnn(workdir, dataset):
    model = workdir / "nn.json"
    assert main(["train", str(dataset), "--param", "hidden=16:16,max_epochs=200,patience=50",
                 "--out", str(model)]) == 0
    meas = workdir / "meas.yaml"
    meas.write_text("measurements:\n  MAP: {value: 80.0, unit: mmHg, rel_error: 0.025}\n"
                    "  P_sys: {value: 120.0, unit: mmHg, rel_error: 0.025}\n")
    out = workdir / "est"
    assert main(["estimate", str(model), "--measurements", str(meas), "--max-iter", "2000",
                 "--reference", "R=1.0,C=1.5,Q=80", "--out", str(out)]) == 0
    head = (out / "estimate.csv").read_text().splitlines()[1]
    assert "error_percent" in head
    assert (out / "trace.csv").exists() and (out / "summary.txt").exists()


def test_stale_model_exit_5(workdir, dataset):
    model = workdir / "stale.json"
    assert main(["train", str(dataset), "--emulator", "pce", "--param", "degree=1", "--out", str(model)]) == 0
    edited = workdir / "edited.csv"
    text = dataset.read_text().splitlines()
    text[2] = text[2].replace(text[2].split(",")[0], "1.2345", 1)
    edited.write_text("\n".join(text) + "\n")
    (workdir / "edited.csv.meta.json").write_text((workdir / "wk.csv.meta.json").read_text())
    assert main(["evaluate", str(model), str(edited), "--out", str(workdir / "ev2")]) == 5


def test_pce_too_few_rows_message(workdir, dataset, capsys):
    code = main(["train", str(dataset), "--emulator", "pce", "--train-size", "3", "--out",
                 str(workdir / "tiny.json")])
    assert code != 0
    assert "C(d+P, d)" in capsys.readouterr().err


def test_config_file_and_unknown_key(workdir, dataset):
    cfg = workdir / "cfg.yaml"
    cfg.write_text(f"dataset: {dataset}\ntrain:\n  emulator: pce\n  param: degree=1\n")
    assert main(["train", "--config", str(cfg), "--out", str(workdir / "c.json")]) == 0
    cfg.write_text("bogus: 1\n")
    assert main(["train", str(dataset), "--config", str(cfg)]) == 2


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "cardiometa.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "simulate" in res.stdout
