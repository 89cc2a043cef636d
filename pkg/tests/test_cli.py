import json
import subprocess
import sys

import pytest

from dopf.cli import main

FILES = ("labels.csv", "policies.json", "mi_report.json", "evaluation.json", "simulation/summary.json",
         "simulation/run_report.csv", "report.json")


def pipeline(out, *extra, feeder="two_bus", count=48):
    out = str(out)
    steps = [["gen-scenarios", "--feeder", feeder, "--count", str(count)], ["label"], ["analyze-info"], ["train"],
             ["simulate"], ["report"]]
    for step in steps:
        assert main(step + ["--out", out, *extra]) == 0, step


def test_full_pipeline_on_two_bus(tmp_path, capsys):
    pipeline(tmp_path, "--seed", "3")
    for name in FILES:
        assert (tmp_path / name).exists(), name
    summary = json.loads((tmp_path / "simulation/summary.json").read_text())
    assert {"centralized", "decentralized", "constant_pf", "no_control", "decentralized_ltc"} <= set(summary["modes"])
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert json.loads(last)["stage"] == "report"


def test_pipeline_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    pipeline(a, "--seed", "11", feeder="five_node", count=60)
    pipeline(b, "--seed", "11", feeder="five_node", count=60)
    for name in FILES + ("scenarios.csv", "split.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_label_is_idempotent(tmp_path):
    out = str(tmp_path)
    assert main(["gen-scenarios", "--feeder", "five_node", "--count", "20", "--out", out]) == 0
    assert main(["label", "--out", out]) == 0
    first = (tmp_path / "labels.csv").read_bytes()
    assert main(["label", "--out", out, "--jobs", "2"]) == 0
    assert (tmp_path / "labels.csv").read_bytes() == first


def test_seed_changes_scenarios(tmp_path):
    for s in ("1", "2"):
        assert main(["gen-scenarios", "--feeder", "five_node", "--count", "10", "--seed", s,
                     "--out", str(tmp_path / s)]) == 0
    assert (tmp_path / "1/scenarios.csv").read_bytes() != (tmp_path / "2/scenarios.csv").read_bytes()


def test_exhaustive_and_greedy_pick_the_same_bus(tmp_path):
    out = str(tmp_path)
    assert main(["gen-scenarios", "--feeder", "five_node", "--count", "200", "--out", out]) == 0
    assert main(["label", "--out", out]) == 0
    picks = {}
    for flag in ("--greedy", "--exhaustive"):
        assert main(["analyze-info", "--select", "1", flag, "--out", out]) == 0
        doc = json.loads((tmp_path / "mi_report.json").read_text())
        picks[flag] = {d: rec["selection"]["chosen"] for d, rec in doc["ders"].items()}
    assert picks["--greedy"] == picks["--exhaustive"]


def test_missing_stage_input(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 3
    err = json.loads((tmp_path / "error.json").read_text())
    assert err["error"] == "MissingStageInput" and err["stage"] == "train"
    assert json.loads(capsys.readouterr().err.strip()) == err


def test_invalid_config(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"split": [0.5, 0.5, 0.5]}))
    assert main(["gen-scenarios", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    cfg.write_text(json.dumps({"opf": {"beta": -1}}))
    assert main(["gen-scenarios", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    cfg.write_text(json.dumps({"colour": 1}))
    assert main(["gen-scenarios", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert main(["gen-scenarios", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 3


def test_error_file_cleared_after_success(tmp_path):
    out = str(tmp_path)
    assert main(["label", "--out", out]) == 3
    assert (tmp_path / "error.json").exists()
    assert main(["gen-scenarios", "--count", "8", "--out", out]) == 0
    assert not (tmp_path / "error.json").exists()


def test_case_preset_flows_into_labels(tmp_path):
    out = str(tmp_path)
    assert main(["gen-scenarios", "--feeder", "feeder30_case2", "--count", "8", "--case", "2", "--out", out]) == 0
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["case"] == "2"
    assert main(["label", "--out", out]) == 0
    lines = (tmp_path / "labels.csv").read_text().splitlines()[1:]
    # case 2 controls real power only
    assert all(float(r.split(",")[3]) == 0.0 for r in lines)
    assert any(float(r.split(",")[2]) > 0.0 for r in lines)


def test_ingest_stage(tmp_path):
    src = tmp_path / "in.csv"
    src.write_text("t,bus,p_c,q_c,p_g,s_cap\n0,1,0.02,0.01,0,0\n15,1,0.03,0.01,0,0\n30,1,0.01,0.0,0,0\n")
    out = tmp_path / "run"
    assert main(["ingest", "--feeder", "two_bus", "--input", str(src), "--out", str(out)]) == 0
    assert (out / "scenarios.csv").exists() and (out / "split.csv").exists()
    assert main(["ingest", "--feeder", "two_bus", "--input", str(tmp_path / "missing.csv"),
                 "--out", str(out)]) == 3


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "dopf.cli", "gen-scenarios", "--count", "4", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert json.loads(res.stdout)["scenarios"] == 4


@pytest.mark.slow
def test_three_phase_pipeline(tmp_path):
    pipeline(tmp_path, "--case", "3ph", feeder="ieee13", count=40)
    summary = json.loads((tmp_path / "simulation/summary.json").read_text())
    assert summary["central"]["reduction_mean"] >= 0.8
