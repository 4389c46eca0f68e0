"""Exit codes and artifacts of the command-line interface."""
import csv
import json

import pytest

from asgdsim.cli import main

CONFIG = """\
[problem]
kind = "quadratic"
dim = 3
sigma_sq = 0.4

[workers]
n = 2
tau = [1.0, 3.0]

[algorithm]
method = "{method}"
epsilon = 0.01

[stepsize]
policy = "fixed"
gamma = 0.05

[run]
seeds = [0, 1]
horizon_iterations = 12
"""


def write_config(tmp_path, method="ringleader", text=None):
    path = tmp_path / "config.toml"
    path.write_text(text if text is not None else CONFIG.format(method=method))
    return str(path)


def test_run_writes_audited_seed_dirs(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "runs"
    assert main(["run", cfg, "--out-dir", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "seed 0" in printed and "seed 1" in printed
    for seed in (0, 1):
        d = out / f"seed-{seed:04d}"
        assert (d / "trace.csv").exists()
        assert (d / "events.csv").exists()
        assert (d / "metadata.json").exists()
        assert "PASS" in (d / "audit.txt").read_text()
    meta = json.loads((out / "seed-0000" / "metadata.json").read_text())
    assert meta["method"] == "ringleader"
    assert meta["seed"] == 0


def test_run_seeds_override_and_env_out_dir(tmp_path, monkeypatch, capsys):
    cfg = write_config(tmp_path)
    monkeypatch.setenv("ASGDSIM_OUT_DIR", str(tmp_path / "envruns"))
    assert main(["run", cfg, "--seeds", "5"]) == 0
    capsys.readouterr()
    assert (tmp_path / "envruns" / "seed-0005" / "trace.csv").exists()
    assert not (tmp_path / "envruns" / "seed-0000").exists()


def test_missing_and_invalid_configs_exit_1(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nope.toml")]) == 1
    bad = tmp_path / "bad.toml"
    bad.write_text("[problem]\nkind = \"quadratic\"\n")  # no workers/etc
    assert main(["run", str(bad)]) == 1
    sweep_cfg = write_config(tmp_path, text=CONFIG.format(method="ringleader")
                             .replace('policy = "fixed"', 'policy = "sweep"')
                             .replace("gamma = 0.05", "grid = [0.05]"))
    capsys.readouterr()
    # A sweep config handed to `run` is a usage error, and vice versa.
    assert main(["run", sweep_cfg]) == 1
    cfg = write_config(tmp_path)
    assert main(["sweep", cfg]) == 1


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_audit_detects_forged_trace(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "runs"
    assert main(["run", cfg, "--seeds", "0", "--out-dir", str(out)]) == 0
    capsys.readouterr()
    trace = out / "seed-0000" / "trace.csv"
    rows = trace.read_text().splitlines()
    header = rows[0].split(",")
    # Forge a delay past the 2n-2 guarantee on the third update.
    cells = rows[3].split(",")
    cells[header.index("max_delay")] = "7"
    rows[3] = ",".join(cells)
    trace.write_text("\n".join(rows) + "\n")
    assert main(["audit", str(out)]) == 2
    printed = capsys.readouterr().out
    assert "FAIL" in printed
    assert "max_delay" in printed or "delay" in printed


def test_audit_on_empty_directory_exits_1(tmp_path, capsys):
    assert main(["audit", str(tmp_path)]) == 1


def test_plot_renders_svg(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "runs"
    main(["run", cfg, "--out-dir", str(out)])
    capsys.readouterr()
    assert main(["plot", str(out), "--window", "3"]) == 0
    assert (out / "convergence.svg").read_text().startswith("<svg")


def test_sweep_cli_reports_best(tmp_path, capsys):
    text = CONFIG.format(method="minibatch") \
        .replace('policy = "fixed"', 'policy = "sweep"') \
        .replace("gamma = 0.05", "grid = [0.02, 0.2]") \
        .replace("horizon_iterations = 12", "horizon_time = 60.0")
    cfg = write_config(tmp_path, text=text)
    assert main(["sweep", cfg, "--out-dir", str(tmp_path / "sw"), "--jobs", "2"]) == 0
    printed = capsys.readouterr().out
    assert "best gamma" in printed
    with open(tmp_path / "sw" / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["gamma"] for r in rows} == {"0.02", "0.2"}


def test_partition_demo_needs_softmax(tmp_path, capsys):
    quad = write_config(tmp_path)
    assert main(["partition-demo", quad]) == 1
    soft = """
[problem]
kind = "softmax"
dim = 4
classes = 3
alpha = 0.4
samples_per_client = 12

[workers]
n = 3
tau = [1.0, 2.0, 3.0]

[algorithm]
method = "malenia"
epsilon = 0.05

[stepsize]
policy = "theory"

[run]
seeds = [0]
horizon_iterations = 5
"""
    cfg = write_config(tmp_path, text=soft)
    capsys.readouterr()
    assert main(["partition-demo", cfg, "--out-dir", str(tmp_path / "pd")]) == 0
    printed = capsys.readouterr().out
    assert "client 0" in printed and "smoothness" in printed
    with open(tmp_path / "pd" / "partition.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert sum(int(r["count"]) for r in rows) == 36


def test_run_reports_divergence_as_exit_2(tmp_path, capsys):
    text = CONFIG.format(method="minibatch").replace(
        "gamma = 0.05", "gamma = 1e8").replace(
        "horizon_iterations = 12", "horizon_iterations = 3000")
    cfg = write_config(tmp_path, text=text)
    assert main(["run", cfg, "--seeds", "0", "--out-dir", str(tmp_path / "dv")]) == 2
    assert "DIVERGED" in capsys.readouterr().out
