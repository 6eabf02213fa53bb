"""Command-line behaviour: exit codes, outputs, messages, determinism."""

import json
import subprocess
import sys

import pytest

from alphafair import analysis, cli
from alphafair.model import RawProblem, save_problem


@pytest.fixture
def problem_file(tmp_path):
    path = tmp_path / "p.json"
    save_problem(RawProblem.from_dense([[1.0, 1.0, 0.0], [0.0, 2.0, 1.0]],
                                       weights=[1.0, 2.0, 1.0]), path)
    return str(path)


@pytest.fixture
def simplex_file(tmp_path):
    path = tmp_path / "s.json"
    save_problem(RawProblem.from_dense([[1.0, 1.0]], weights=[1.0, 3.0]), path)
    return str(path)


def test_solve_happy_path(problem_file, tmp_path, capsys):
    trace, report, out = tmp_path / "t.csv", tmp_path / "r.json", tmp_path / "x.json"
    code = cli.main(["solve", "--problem", problem_file, "--alpha", "1", "--eps", "0.1",
                     "--trace", str(trace), "--report", str(report), "--output", str(out)])
    assert code == 0
    assert trace.read_text().startswith("round,objective,potential,gap")
    rep = json.loads(report.read_text())
    assert rep["stop_reason"] == "converged"
    assert {"delta", "C", "kappa", "beta1", "beta2", "tau0", "tau1"} <= set(rep["params"])
    assert len(rep["problem_hash"]) == 64 and len(rep["problem_file_hash"]) == 64
    assert json.loads(out.read_text())["method"] == "rounds"
    assert json.loads(capsys.readouterr().out)["stop_reason"] == "converged"


def test_solve_epsilon_error_cites_bound(problem_file, capsys):
    code = cli.main(["solve", "--problem", problem_file, "--alpha", "0.9", "--eps", "0.2"])
    assert code == 1
    err = capsys.readouterr().err
    assert "--eps" in err and "(1-alpha)/alpha" in err


def test_solve_budget_exhaustion_still_writes(problem_file, tmp_path):
    trace = tmp_path / "t.csv"
    code = cli.main(["solve", "--problem", problem_file, "--eps", "0.1",
                     "--max-rounds", "5", "--trace", str(trace)])
    assert code == 2
    rows = trace.read_text().splitlines()[1:]
    # fast-forward may skip recording frozen rounds
    assert 1 <= len(rows) <= 5 and rows[0].startswith("0,")


def test_solve_async_and_figure(problem_file, tmp_path):
    fig = tmp_path / "f.png"
    code = cli.main(["solve", "--problem", problem_file, "--eps", "0.1", "--mode", "async",
                     "--q", "0.5", "--seed", "4", "--figure", str(fig)])
    assert code == 0
    assert fig.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_solve_tiny_alpha_routes_to_lp(simplex_file, capsys):
    code = cli.main(["solve", "--problem", simplex_file, "--alpha", "1e-4", "--eps", "0.1"])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["method"] == "lp" and out["lp_value"] == pytest.approx(3.0)


@pytest.mark.parametrize("argv, flag", [
    (["solve", "--problem", "missing.json", "--eps", "0.1"], "missing.json"),
    (["solve", "--problem", "{p}", "--eps", "0.1", "--q", "0.5"], "--q"),
    (["solve", "--problem", "{p}", "--eps", "0.1", "--mode", "async", "--q", "2"], "--q"),
    (["check", "--problem", "{p}", "--lemma", "lp-approx"], "--eps"),
    (["oracle", "--problem", "{p}", "--method", "closed-form"], "closed-form"),
    (["solve", "--problem", "{p}", "--eps", "0.1", "--max-rounds", "0"], "--max-rounds"),
    (["solve", "--problem", "{p}"], "--eps"),
])
def test_input_errors_name_the_flag(problem_file, capsys, argv, flag):
    argv = [a.replace("{p}", problem_file) for a in argv]
    assert cli.main(argv) == 1
    assert flag in capsys.readouterr().err


def test_malformed_problem_file(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"alpha": 1}')
    assert cli.main(["oracle", "--problem", str(bad)]) == 1
    err = capsys.readouterr().err
    assert str(bad) in err and "missing key" in err


@pytest.mark.parametrize("method", ["barrier", "closed-form", "mmf", "lp"])
def test_oracle_methods(simplex_file, tmp_path, method):
    out = tmp_path / "x.json"
    assert cli.main(["oracle", "--problem", simplex_file, "--method", method,
                     "--output", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["method"] == method and len(doc["x"]) == 2


def test_check_outputs_lemma_row(problem_file, tmp_path):
    out = tmp_path / "l.csv"
    assert cli.main(["check", "--lemma", "mmf-limit", "--problem", problem_file,
                     "--eps", "0.25", "--output", str(out)]) == 0
    header, row = out.read_text().splitlines()
    assert header == "lemma_id,instance_hash,claimed,measured,margin,pass"
    assert row.startswith("mmf-limit,") and row.endswith(",true")


def test_check_failure_exit_code(problem_file, monkeypatch):
    failed = analysis.LemmaReport("lower-bound", "x", "h", 1.0, 0.5, -0.5, False)
    monkeypatch.setattr(analysis, "run_check", lambda *a, **k: failed)
    assert cli.main(["check", "--lemma", "lower-bound", "--problem", problem_file]) == 3


def test_scenario_and_sweep_are_byte_deterministic(problem_file, tmp_path):
    events = tmp_path / "ev.json"
    events.write_text(json.dumps({
        "schedule": {"mode": "async", "q": 0.5, "seed": 9}, "epsilon": 0.1,
        "events": [{"at_round": 300, "kind": "reset_x", "values": 1.0}]}))
    outs = []
    for k in range(2):
        trace, table = tmp_path / f"t{k}.csv", tmp_path / f"s{k}.csv"
        assert cli.main(["scenario", "--problem", problem_file, "--events", str(events),
                         "--trace", str(trace)]) == 0
        assert cli.main(["sweep", "--problem", problem_file, "--eps", "0.1", "0.05",
                         "--alpha", "1", "2", "--jobs", str(k + 1),
                         "--output", str(table)]) == 0
        outs.append((trace.read_bytes(), table.read_bytes()))
    assert outs[0] == outs[1]


def test_module_entry_point(problem_file, tmp_path):
    trace = tmp_path / "t.csv"
    proc = subprocess.run([sys.executable, "-m", "alphafair", "solve", "--problem", problem_file,
                           "--eps", "0.1", "--trace", str(trace)],
                          capture_output=True, text=True, env={"ALPHA_FAIR_LOG": "info",
                                                              "PATH": ""})
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["stop_reason"] == "converged"
    assert "INFO" in proc.stderr
    assert trace.exists()
