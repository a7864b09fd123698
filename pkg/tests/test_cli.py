"""Command-line interface: problem loading, records, exit codes, files."""

import json
import math
import os

import numpy as np
import pytest

from resilopt.cli import (
    SchemaError,
    bundled_case_studies,
    emit_frontier,
    load_problem,
    main,
)
from resilopt.exact import ParetoPoint
from resilopt.model import LTVSystem, OpenLoopSequence


ROBOT = """
horizon = 2
x0 = [0.0]
spec = "always[0,2](R)"

[system]
kind = "ltv"
A = [[1.0]]
B = [[1.0]]

[regions.R]
kind = "box"
bounds = [[-1.0, 1.0]]

[query]
metric = "resilience"
controller = "open"
"""


@pytest.fixture
def tiny_problem(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(ROBOT)
    return str(path)


# ---------------------------------------------------------------------------
# problem files


def test_load_problem_builds_system_and_sets(tiny_problem):
    p = load_problem(tiny_problem)
    assert isinstance(p.system, LTVSystem)
    assert p.system.N == 2 and p.sets.polytopic
    assert p.query["metric"] == "resilience"


def test_bundled_problems_all_load():
    names = bundled_case_studies()
    assert len(names) == 8
    for path in names:
        p = load_problem(path)
        assert p.system.N >= 1
    # short names resolve against the bundled directory
    p = load_problem("robot_open")
    assert p.system.n == 2


@pytest.mark.parametrize("mutation,needle", [
    ("horizon = 2", "horizon"),                      # removed below
    ('spec = "always[0,2](R)"', "spec"),
    ("[system]\nkind = \"ltv\"", "system"),
])
def test_missing_required_fields_raise_schema_errors(tmp_path, mutation, needle):
    text = ROBOT.replace(mutation, "")
    path = tmp_path / "broken.toml"
    path.write_text(text)
    with pytest.raises(SchemaError) as err:
        load_problem(str(path))
    assert needle in str(err.value)


def test_schema_error_paths(tmp_path):
    bad_kind = ROBOT.replace('kind = "box"', 'kind = "sphere"')
    path = tmp_path / "bad.toml"
    path.write_text(bad_kind)
    with pytest.raises(SchemaError) as err:
        load_problem(str(path))
    assert "regions.R.kind" in str(err.value)

    bad_x0 = ROBOT.replace("x0 = [0.0]", "x0 = [0.0, 1.0]")
    path.write_text(bad_x0)
    with pytest.raises(SchemaError):
        load_problem(str(path))

    path.write_text("horizon = [not toml")
    with pytest.raises(SchemaError):
        load_problem(str(path))

    with pytest.raises(SchemaError):
        load_problem(str(tmp_path / "absent.toml"))


# ---------------------------------------------------------------------------
# subcommands end to end


def test_resilience_round_trip(tiny_problem, tmp_path, capsys):
    out = tmp_path / "res.json"
    code = main(["resilience", "--problem", tiny_problem,
                 "--out", str(out), "--quiet"])
    assert code == 0
    rec = json.loads(out.read_text())
    # identity loop, |x| <= 1 over 2 steps, x0 = 0: step 2 accumulates two
    # disturbance draws that open-loop inputs cannot cancel, so mu* = 1/2
    assert abs(rec["value"] - 0.5) <= 1e-9
    assert rec["status"] == "feasible"
    assert rec["controller"]["kind"] == "open-loop"
    assert rec["certificate"]["satisfied"] is True
    assert rec["problem"]["content"]["horizon"] == 2
    assert rec["tool"]["name"] == "resilopt"
    assert capsys.readouterr().out == ""


def test_stdout_when_no_out_path(tiny_problem, capsys):
    code = main(["resilience", "--problem", tiny_problem])
    assert code == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["command"] == "resilience"


def test_effort_exit_two_past_max_resilience(tiny_problem, tmp_path):
    out = tmp_path / "eff.json"
    code = main(["effort", "--problem", tiny_problem, "--mu", "5.0",
                 "--out", str(out), "--quiet"])
    assert code == 2
    rec = json.loads(out.read_text())
    assert rec["status"] == "infeasible" and rec["mu0"] == 5.0


def test_nominal_infeasible_exit_two(tmp_path):
    text = ROBOT.replace("x0 = [0.0]", "x0 = [9.0]")
    path = tmp_path / "far.toml"
    path.write_text(text)
    code = main(["resilience", "--problem", str(path),
                 "--out", str(tmp_path / "r.json"), "--quiet"])
    assert code == 2
    rec = json.loads((tmp_path / "r.json").read_text())
    assert rec["status"] == "nominal-infeasible"


def test_schema_problem_exits_one(tmp_path, capsys):
    path = tmp_path / "broken.toml"
    path.write_text(ROBOT.replace('kind = "ltv"', 'kind = "pde"'))
    code = main(["resilience", "--problem", str(path)])
    assert code == 1
    assert "system.kind" in capsys.readouterr().err


def test_scenario_command_rejected_for_exact_route(tmp_path, capsys):
    text = ROBOT.replace('kind = "ltv"\nA = [[1.0]]\nB = [[1.0]]',
                         'kind = "nonlinear"\nmodel = "acc"')
    text = text.replace("x0 = [0.0]", "x0 = [60.0, 15.0]")
    text = text.replace("bounds = [[-1.0, 1.0]]",
                        "bounds = [[0.0, 100.0], [0.0, 30.0]]")
    path = tmp_path / "nl.toml"
    path.write_text(text)
    code = main(["resilience", "--problem", str(path)])
    assert code == 1
    assert "scenario" in capsys.readouterr().err


def test_scenario_round_trip_on_toy(tmp_path):
    text = """
horizon = 1
x0 = [0.0]
spec = "next^1(R)"

[system]
kind = "ltv"
A = [[1.0]]
B = [[0.0]]

[regions.R]
kind = "box"
bounds = [[-1.0, 1.0]]

[query]
controller = "open"
w1 = 1.0
w2 = 0.0

[query.scenario]
M = 10
beta = 1e-1
seed = 3
fresh = 200

[query.search]
restarts = 2
presamples = 8
lifted_starts = 0
"""
    path = tmp_path / "toy.toml"
    path.write_text(text)
    out = tmp_path / "cert.json"
    code = main(["scenario", "--problem", str(path), "--out", str(out),
                 "--quiet"])
    assert code == 0
    rec = json.loads(out.read_text())
    cert = rec["certificate"]
    assert cert["mu"] > 0 and cert["s_M"] <= 10
    assert 0.0 <= cert["bound"] <= 1.0
    assert cert["violation_rate"] is not None
    assert rec["seed"] == 3

    # --seed overrides the file and changes the draw
    out2 = tmp_path / "cert2.json"
    code = main(["scenario", "--problem", str(path), "--out", str(out2),
                 "--seed", "4", "--quiet"])
    assert code == 0
    rec2 = json.loads(out2.read_text())
    assert rec2["seed"] == 4
    assert rec2["certificate"]["mu"] != cert["mu"]


def test_unknown_search_key_is_a_schema_error(tmp_path, capsys):
    text = ROBOT + "\n[query.search]\nwalkers = 5\n"
    text = text.replace('controller = "open"', 'controller = "linear"')
    path = tmp_path / "bad_search.toml"
    path.write_text(text)
    assert main(["resilience", "--problem", str(path)]) == 1
    assert "query.search.walkers" in capsys.readouterr().err


def test_risk_bound_prints_three_decimals(capsys):
    assert main(["risk-bound", "--k", "9", "--M", "500", "--beta", "1e-2"]) == 0
    assert capsys.readouterr().out.strip() == "0.046"


def test_risk_bound_record_keeps_full_precision(tmp_path):
    out = tmp_path / "rb.json"
    main(["risk-bound", "--k", "4", "--M", "10", "--beta", "1e-2",
          "--out", str(out), "--quiet"])
    rec = json.loads(out.read_text())
    assert abs(rec["bound"] - 0.851) <= 1e-3
    assert rec["bound"] != round(rec["bound"], 3)


def test_rollout_zero_input_table(tiny_problem, tmp_path):
    out = tmp_path / "roll.csv"
    code = main(["rollout", "--problem", tiny_problem, "--format", "csv",
                 "--out", str(out), "--quiet"])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "sample,k,x0,u0"
    assert len(lines) == 1 + 3          # N+1 states for one sample


def test_rollout_reuses_a_recorded_controller(tiny_problem, tmp_path):
    rec_path = tmp_path / "res.json"
    main(["resilience", "--problem", tiny_problem, "--out", str(rec_path),
          "--quiet"])
    out = tmp_path / "roll.json"
    code = main(["rollout", "--problem", tiny_problem,
                 "--record", str(rec_path), "--mu", "0.5", "--samples", "8",
                 "--seed", "2", "--out", str(out), "--quiet"])
    assert code == 0
    rec = json.loads(out.read_text())
    assert len(rec["trajectories"]) == 8
    assert len(rec["margins"]) == 8
    assert min(rec["margins"]) >= 0.5 - 1.0  # sanity: mu=0.5 keeps margins tame


def test_certify_exit_codes(tiny_problem, tmp_path):
    ok = main(["certify", "--problem", tiny_problem, "--mu", "0.45",
               "--out", str(tmp_path / "c0.json"), "--quiet"])
    assert ok == 0
    bad = main(["certify", "--problem", tiny_problem, "--mu", "0.55",
                "--out", str(tmp_path / "c1.json"), "--quiet"])
    assert bad == 2
    rec = json.loads((tmp_path / "c1.json").read_text())
    assert rec["status"] == "violated"
    assert rec["certificate"]["worst_margin"] < 0
    assert rec["certificate"]["witness"] is not None


def test_pareto_csv_sorted_by_eps(tiny_problem, tmp_path):
    text = ROBOT.replace(
        'metric = "resilience"\ncontroller = "open"',
        'metric = "pareto"\ncontroller = "open"\n'
        'weights = [[1.0, 0.1], [1.0, 3.0]]')
    path = tmp_path / "par.toml"
    path.write_text(text)
    out = tmp_path / "front.csv"
    code = main(["pareto", "--problem", str(path), "--format", "csv",
                 "--out", str(out), "--quiet"])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("w1,w2,mu,eps")
    eps_col = [float(line.split(",")[3]) for line in lines[1:]]
    assert eps_col == sorted(eps_col)


def test_emit_frontier_json_and_file(tmp_path):
    pts = [ParetoPoint(1.0, 0.5, 0.3, 0.9, 0.3 - 0.45,
                       OpenLoopSequence(np.zeros((1, 1)))),
           ParetoPoint(1.0, 2.0, 0.1, 0.2, 0.1 - 0.4,
                       OpenLoopSequence(np.zeros((1, 1))))]
    path = tmp_path / "front.json"
    text = emit_frontier(pts, str(path), fmt="json")
    assert path.read_text() == text
    doc = json.loads(text)
    assert [d["eps"] for d in doc] == [0.2, 0.9]
    assert doc[0]["controller"]["kind"] == "open-loop"


def test_atomic_write_leaves_no_temp_files(tiny_problem, tmp_path):
    out = tmp_path / "res.json"
    main(["resilience", "--problem", tiny_problem, "--out", str(out),
          "--quiet"])
    leftovers = [f for f in os.listdir(tmp_path) if f.endswith(".tmp")]
    assert leftovers == []
    assert out.exists()


def test_records_handle_infinity(tmp_path):
    # eps0 omitted means an unbounded input; the record must stay valid JSON
    text = ROBOT.replace("always[0,2](R)", "R")
    path = tmp_path / "unb.toml"
    path.write_text(text)
    out = tmp_path / "unb.json"
    code = main(["resilience", "--problem", str(path), "--out", str(out),
                 "--quiet"])
    assert code == 0
    rec = json.loads(out.read_text())
    assert rec["value"] == "inf"
    assert rec["note"] is not None


def test_csv_key_value_fallback(tiny_problem, tmp_path):
    out = tmp_path / "res.csv"
    main(["resilience", "--problem", tiny_problem, "--format", "csv",
          "--out", str(out), "--quiet"])
    lines = out.read_text().splitlines()
    assert lines[0] == "field,value"
    fields = {line.split(",")[0] for line in lines[1:]}
    assert "value" in fields and "status" in fields
