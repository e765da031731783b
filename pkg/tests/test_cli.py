import csv
import json
import math

import numpy as np
import pytest

from dawm import pipeline as P
from dawm.cli import main, method_label
from conftest import tiny_config


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(tiny_config().to_dict()))
    return p


def rows(path):
    with open(path) as f:
        return list(csv.reader(f))


def test_dry_run_prints_config_and_writes_nothing(tmp_path, config_file, capsys, monkeypatch):
    work = tmp_path / "work"
    work.mkdir()
    monkeypatch.chdir(work)
    code = main(["run", "--config", str(config_file), "--out", "o", "--set", "synthesis.T=8", "--dry-run"])
    out = capsys.readouterr().out
    assert code == 0 and list(work.iterdir()) == []
    resolved = json.loads(out)
    assert resolved["synthesis"]["T"] == 8 and resolved["seed"] == 100
    # feeding the printed config back resolves to the same thing
    (tmp_path / "resolved.json").write_text(out)
    assert main(["run", "--config", str(tmp_path / "resolved.json"), "--dry-run"]) == 0
    assert capsys.readouterr().out == out


def test_seed_flag(capsys):
    assert main(["gen-data", "--seed", "7", "--dry-run"]) == 0
    assert json.loads(capsys.readouterr().out)["seed"] == 7


@pytest.mark.parametrize("argv,needle", [
    (["eval", "--out", "x"], "--checkpoint"),
    (["run", "--set", "synthesis.horizn=3", "--dry-run"], "synthesis.horizon"),
    (["frobnicate"], "invalid choice"),
    (["gen-data"], "--out"),
    (["run", "--config", "/nonexistent/c.json", "--dry-run"], "not found"),
    (["run-matrix", "--out", "m", "--sweep", "Q"], "preset"),
])
def test_config_errors_exit_1(argv, needle, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert needle in err


def test_corrupt_dataset_is_config_error(tmp_path, capsys):
    bad = tmp_path / "d.dawm"
    bad.write_bytes(b"not a dataset")
    assert main(["train-idm", "--dataset", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_runtime_fault_exit_2(tmp_path, config_file, capsys):
    buf = P.make_buffer(np.zeros((10, 4)), np.zeros((10, 2)), np.full(10, np.nan), np.zeros((10, 4)), True)
    P.save_buffer(buf, tmp_path / "b.npz")
    code = main(["train-agent", "--config", str(config_file), "--buffer", str(tmp_path / "b.npz"),
                 "--out", str(tmp_path / "o")])
    assert code == 2
    assert "runtime fault" in capsys.readouterr().err


def test_full_chain(tmp_path, config_file, capsys):
    c = ["--config", str(config_file)]
    d = tmp_path
    assert main(["gen-data", *c, "--out", str(d / "data")]) == 0
    ds = str(d / "data" / "dataset.dawm")
    assert main(["train-dwm", *c, "--dataset", ds, "--out", str(d / "dwm")]) == 0
    assert main(["train-idm", *c, "--dataset", ds, "--out", str(d / "idm")]) == 0
    assert main(["synthesize", *c, "--dataset", ds, "--dwm", str(d / "dwm" / "ckpt" / "dwm.ckpt"),
                 "--idm", str(d / "idm" / "ckpt" / "idm.ckpt"), "--out", str(d / "syn"), "--threads", "2"]) == 0
    stats = json.loads((d / "syn" / "synthesis.json").read_text())
    assert stats["n_transitions"] == 300 * 4
    assert main(["train-agent", *c, "--buffer", str(d / "syn" / "buffer.npz"), "--out", str(d / "agent")]) == 0
    assert main(["eval", *c, "--checkpoint", str(d / "agent" / "ckpt" / "agent.ckpt"), "--out", str(d / "ev")]) == 0
    rep = json.loads((d / "ev" / "report.json").read_text())
    assert math.isfinite(rep["normalized_return"])
    assert capsys.readouterr().out == ""      # data goes to files, diagnostics to stderr


def test_gen_data_idempotent(tmp_path, config_file):
    for name in ("a", "b"):
        assert main(["gen-data", "--config", str(config_file), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "dataset.dawm").read_bytes() == (tmp_path / "b" / "dataset.dawm").read_bytes()


def test_writes_stay_inside_out(tmp_path, config_file, monkeypatch):
    work = tmp_path / "work"
    work.mkdir()
    monkeypatch.chdir(work)
    assert main(["run", "--config", str(config_file), "--out", "o"]) == 0
    assert [p.name for p in work.iterdir()] == ["o"]
    assert (work / "o" / "report.json").exists()


def test_run_matrix_command(tmp_path, config_file):
    out = tmp_path / "m"
    assert main(["run-matrix", "--config", str(config_file), "--sweep", "synthesis.horizon=1,3",
                 "--seeds", "1,2", "--out", str(out)]) == 0
    table = rows(out / "table.csv")
    assert [r[0] for r in table[1:]] == ["horizon=1", "horizon=3"]
    assert all(r[1] == "2" for r in table[1:])


def fake_run(d, seed, value, agent="td3bc"):
    d.mkdir(parents=True)
    cfg = tiny_config(seed=seed).to_dict()
    cfg["agent"]["kind"] = agent
    (d / "config.json").write_text(json.dumps(cfg))
    if value is not None:
        (d / "report.json").write_text(json.dumps({"env": "pointmass2d", "normalized_return": value}))


def test_report_mean_over_seeds(tmp_path):
    vals = [0.91, 0.37, 0.5533]
    dirs = []
    for i, v in enumerate(vals):
        fake_run(tmp_path / f"s{i}", i, v)
        dirs.append(str(tmp_path / f"s{i}"))
    fake_run(tmp_path / "iql", 0, 0.25, agent="iql")
    assert main(["report", *dirs, str(tmp_path / "iql"), "--out", str(tmp_path / "r")]) == 0
    table = rows(tmp_path / "r" / "report.csv")
    assert table[0] == ["env", "method", "n_runs", "mean", "std"]
    assert [r[1] for r in table[1:]] == ["iql-dawm-H3-T1", "td3bc-dawm-H3-T1"]
    td = table[2]
    assert td[2] == "3" and abs(float(td[3]) - sum(vals) / 3) <= 1e-12
    assert abs(float(td[4]) - float(np.std(vals))) <= 1e-12
    assert "td3bc-dawm-H3-T1" in (tmp_path / "r" / "summary.txt").read_text()


def test_report_single_and_empty(tmp_path):
    fake_run(tmp_path / "one", 1, 0.7)
    assert main(["report", str(tmp_path / "one"), "--out", str(tmp_path / "r1")]) == 0
    assert len(rows(tmp_path / "r1" / "report.csv")) == 2
    assert main(["report", "--out", str(tmp_path / "r0")]) == 0
    assert rows(tmp_path / "r0" / "report.csv") == [["env", "method", "n_runs", "mean", "std"]]


def test_report_missing_marks_failed(tmp_path):
    fake_run(tmp_path / "ok", 1, 0.7)
    fake_run(tmp_path / "bad", 2, None)
    assert main(["report", str(tmp_path / "ok"), str(tmp_path / "bad"), "--out", str(tmp_path / "r")]) == 0
    table = rows(tmp_path / "r" / "report.csv")
    assert table[1][3:] == ["FAILED", "FAILED"] and table[1][2] == "2"


def test_method_label():
    cfg = tiny_config().to_dict()
    assert method_label(cfg) == "td3bc-dawm-H3-T1"
    cfg["source"] = "real"
    assert method_label(cfg) == "td3bc-real"
