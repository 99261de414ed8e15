import csv
import math
import subprocess
import sys

import numpy as np
import pytest

from dporacle.algorithms import dpsgd_parameters
from dporacle.cli import main
from dporacle.harness import (COLUMNS, ConfigError, SweepGrid, emit_report, expand_grid,
                              loglog_fit, parse_config, read_rows, run_experiment, scatter_svg,
                              sweep)

BASE = """
[instance]
family = nonsmooth
d = 64
c = 2
[algorithm]
name = dpsgd
alpha = 0.2
rho = 1
[oracle]
kind = gaussian
[run]
trials = 2
seed = 5
"""


def cfg(extra=""):
    return parse_config(BASE + extra)


def test_parse_and_validate():
    c, grid = cfg()
    assert c.instance.d == 64 and c.algorithm.mbar == math.inf and grid is None
    with pytest.raises(ConfigError):
        parse_config(BASE.replace("gaussian", "psychic"))
    with pytest.raises(ConfigError):
        parse_config(BASE + "[instance]\n")
    with pytest.raises(ConfigError):
        parse_config("[bogus]\nx = 1\n")
    with pytest.raises(ConfigError):
        parse_config(BASE.replace("d = 64", "d = sixty"))


def test_trivial_release_record():
    # alpha above BL/3 releases the start point without any oracle call
    c, _ = parse_config(BASE.replace("alpha = 0.2", "alpha = 0.9").replace("c = 2", "c = 1")
                        .replace("trials = 2", "trials = 1").replace("gaussian", "identity"))
    recs = run_experiment(c)
    assert len(recs) == 1 and recs[0].calls_total == 0 and recs[0].error == ""


def test_calls_match_formula():
    c, _ = parse_config(BASE.replace("d = 64", "d = 256"))
    recs = run_experiment(c, timing=False)
    plan = dpsgd_parameters(0.2, 1.0, math.inf, 256, 1.0, 2.0)
    assert all(r.calls_total == plan.T * plan.m for r in recs)


def test_errors_are_recorded_not_raised():
    c, _ = parse_config(BASE.replace("d = 64", "d = 4"))
    recs = run_experiment(c)
    assert all(r.error.startswith("InfeasibleInstanceError") for r in recs)
    row = recs[0].row()
    assert len(row) == len(COLUMNS) and "nan" not in ",".join(row).lower()


def test_sweep_grid_modes():
    g = SweepGrid((("instance.d", ("64", "256")), ("algorithm.mbar", ("1", "4"))))
    assert len(g.points()) == 4
    p = SweepGrid((("instance.d", ("64", "256")), ("algorithm.mbar", ("1", "4"))), "paired")
    assert p.points() == [{"instance.d": "64", "algorithm.mbar": "1"},
                          {"instance.d": "256", "algorithm.mbar": "4"}]
    with pytest.raises(ConfigError):
        SweepGrid(())
    with pytest.raises(ConfigError):
        SweepGrid((("instance.d", ()),))


def test_sweep_parallel_equals_serial_and_resumes(tmp_path):
    c, grid = cfg("[sweep]\ninstance.d = 64, 128\n")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    sweep(grid, c, a, parallel=1, timing=False)
    sweep(grid, c, b, parallel=2, timing=False)
    assert a.read_bytes() == b.read_bytes()
    rows = read_rows(a)
    assert len(rows) == 4
    # drop one row and resume: only that trial reruns, file identical afterwards
    lines = a.read_text().splitlines(keepends=True)
    a.write_text("".join(lines[:-1]))
    sweep(grid, c, a, timing=False)
    assert a.read_bytes() == b.read_bytes()


def test_repeat_invocations_identical(tmp_path):
    c, grid = cfg("[sweep]\nalgorithm.mbar = 1, 4\n")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    sweep(grid, c, a, timing=False)
    sweep(grid, c, b, timing=False)
    assert a.read_bytes() == b.read_bytes()


def test_planned_calls_scaling_sweeps():
    base, _ = cfg()
    g = SweepGrid((("instance.d", ("64", "256", "1024")),))
    calls = []
    for c in expand_grid(g, base):
        p = dpsgd_parameters(c.algorithm.alpha, c.algorithm.rho, c.algorithm.mbar,
                             c.instance.d, 1.0, 2.0)
        calls.append(p.T * p.m)
    assert calls[1] / calls[0] == 2 and calls[2] / calls[1] == 2
    g = SweepGrid((("algorithm.mbar", ("1", "4", "16")),))
    calls = []
    for c in expand_grid(g, base):
        p = dpsgd_parameters(c.algorithm.alpha, c.algorithm.rho, c.algorithm.mbar, 1024, 1, 2)
        calls.append(p.T * p.m)
    assert calls[0] / calls[1] == 4 and calls[1] / calls[2] == 4


def test_report_fit_and_error_exclusion(tmp_path):
    rows = []
    for i, d in enumerate([64, 256, 1024, 4096]):
        p = dpsgd_parameters(0.1, 1.0, math.inf, d)
        rows.append({c: "" for c in COLUMNS} | {"config_hash": f"h{i}", "trial": "0",
                                                 "d": str(d), "calls_total": str(p.T * p.m)})
    rows.append({c: "" for c in COLUMNS} | {"config_hash": "zz", "trial": "0", "d": "8",
                                             "calls_total": "999999", "error": "Boom: x"})
    svg, slope = scatter_svg(rows)
    assert 0.4 <= slope <= 0.6 and svg.startswith("<svg")
    out = emit_report(rows, "csv", tmp_path / "r.csv")
    assert len(read_rows(out)) == 5
    with pytest.raises(ValueError):
        emit_report([], "csv", tmp_path / "x.csv")


def test_loglog_fit_exact():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    assert loglog_fit(x, 3 * x ** 1.5)[0] == pytest.approx(1.5)


def test_single_record_csv(tmp_path):
    c, _ = parse_config(BASE.replace("trials = 2", "trials = 1"))
    out = emit_report(run_experiment(c, timing=False), "csv", tmp_path / "one.csv")
    with out.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == COLUMNS and len(rows) == 2


# CLI ---------------------------------------------------------------------------------------


def write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_cli_run_and_exit_codes(tmp_path, capsys):
    p = write(tmp_path, BASE)
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o.csv"),
                 "--no-timing"]) == 0
    assert len(read_rows(tmp_path / "o.csv")) == 2
    assert main(["run", "--config", str(tmp_path / "missing.ini")]) == 1
    assert main(["run", "--config", str(write(tmp_path, "[run]\ntrials = 0\n", "bad.ini"))]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["report", str(tmp_path / "o.csv"), "--out", str(tmp_path / "nope" / "x.svg")]) == 2


def test_cli_seed_override(tmp_path):
    p = write(tmp_path, BASE)
    main(["run", "--config", str(p), "--seed", "11", "--out", str(tmp_path / "s.csv"),
          "--no-timing"])
    assert {r["seed"] for r in read_rows(tmp_path / "s.csv")} == {"11"}


def test_cli_gen_instance(tmp_path):
    from dporacle.instances import load_instance

    p = write(tmp_path, BASE)
    assert main(["gen-instance", "--config", str(p), "--out", str(tmp_path / "i.bin")]) == 0
    inst = load_instance(tmp_path / "i.bin")
    assert inst.d == 64 and inst.K == 6
    # a run from the stored instance file
    q = write(tmp_path, BASE.replace("c = 2", f"c = 2\nfile = {tmp_path / 'i.bin'}"), "f.ini")
    assert main(["run", "--config", str(q), "--out", str(tmp_path / "f.csv")]) == 0
    assert all(r["error"] == "" for r in read_rows(tmp_path / "f.csv"))


def test_cli_sweep_and_report(tmp_path):
    p = write(tmp_path, BASE + "[sweep]\ninstance.d = 64, 256\n")
    assert main(["sweep", "--config", str(p), "--out", str(tmp_path / "s.csv"),
                 "--parallel", "2", "--no-timing"]) == 0
    assert main(["report", str(tmp_path / "s.csv"), "--out", str(tmp_path / "s.svg")]) == 0
    assert "slope" in (tmp_path / "s.svg").read_text()
    assert main(["sweep", "--config", write(tmp_path, BASE, "n.ini").as_posix(), "--out",
                 str(tmp_path / "n.csv")]) == 1


def test_cli_account(tmp_path, capsys):
    chain = write(tmp_path, "zcdp 0.5\ngroup 3\n", "chain.txt")
    assert main(["account", str(chain)]) == 0
    assert "rho=4.5" in capsys.readouterr().out
    assert main(["account", str(write(tmp_path, "subsample 100 100\n", "bad.txt"))]) == 1


def test_console_script_module_entry(tmp_path):
    chain = write(tmp_path, "approx 0.1 1e-6\namplify 10 100\n", "chain.txt")
    out = subprocess.run([sys.executable, "-m", "dporacle.cli", "account", str(chain)],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "eps=0.06" in out.stdout
