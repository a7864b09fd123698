"""End-to-end acceptance checks.

One test per shipped guarantee; each prints a single PASS/FAIL line (written
past pytest's capture so it always appears in the run log) and then asserts.
Published reference values are checked at their stated tolerances; property
checks run on randomized instances with fixed seeds.
"""

import functools
import json
import math
import sys
import time

import numpy as np

from resilopt import cli, lp
from resilopt.exact import (
    SearchConfig,
    effort_closed,
    effort_open,
    pareto_closed,
    resilience_closed,
    resilience_open,
)
from resilopt.farkas import certify_vertices, l1_row_norms, open_loop_blocks
from resilopt.model import LTVSystem, NonlinearSystem, make_nonlinear_system
from resilopt.scenario import (
    ScenarioObjective,
    SolveOptions,
    open_loop_template,
    linear_template,
    risk_bound,
    run_pipeline,
    sample_disturbances,
    solve_scenario,
)
from resilopt.specs import (
    Always,
    Atom,
    Eventually,
    Next,
    NormBall,
    box,
    compile as compile_spec,
    margin,
    parse,
)


def _report(num: int, ok: bool, detail: str) -> None:
    line = f"[criterion {num}] {'PASS' if ok else 'FAIL'} - {detail}"
    print(line, file=sys.__stdout__, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# shared instances


@functools.cache
def robot():
    regions = {
        "R1": box([(-0.3, 0.3), (0.6, 1.25)]),
        "R2": box([(0.8, 1.5), (1.2, 1.75)]),
        "R3": box([(-1.0, 1.7), (0.0, 2.0)]),
    }
    sys_ = LTVSystem(np.eye(2), np.eye(2), 6)
    formula = parse("next^2 (R1) & always[4,6] (R2) & always[0,6] (R3)",
                    regions, 6)
    return sys_, compile_spec(formula), np.array([0.0, 0.2]), formula


@functools.cache
def generator():
    H, D, Kf, Ts, Te = 3.0, 0.5, 0.8, 0.5, 0.4
    A = np.stack([
        [[1.0, Ts, 0.0],
         [-Ts * (2.0 - 0.05 * k) / (2 * H), 1.0 - Ts * D / (2 * H),
          -Ts * Kf / (2 * H)],
         [0.0, 0.0, 1.0 - Ts / Te]]
        for k in range(30)])
    B = np.array([[0.0, 0.0], [Ts / (2 * H), 0.0], [0.0, Ts / Te]])
    sys_ = LTVSystem(A, B, 30)
    regions = {
        "R1": box([(-0.5, 0.5), (-0.1, 0.1), (-2.0, 2.0)]),
        "R2": box([(-2.0, 10.0), (-2.0, 10.0), (-5.0, 5.0)]),
    }
    sets = compile_spec(parse("always[2,30] (R1) & always[0,30] (R2)",
                              regions, 30))
    return sys_, sets, np.array([0.5, 0.0, 0.0])


# ---------------------------------------------------------------------------
# 1. published risk-bound table


def test_criterion_1_risk_bound_table():
    table = {
        (10, 4): (0.851, 0.936, 0.971),
        (100, 8): (0.202, 0.259, 0.307),
        (500, 9): (0.046, 0.059, 0.072),
    }
    betas = (1e-2, 1e-4, 1e-6)
    started = time.perf_counter()
    worst = 0.0
    for (M, k), row in table.items():
        for beta, want in zip(betas, row):
            worst = max(worst, abs(risk_bound(k, M, beta) - want))
    elapsed = time.perf_counter() - started
    ok = worst <= 1e-3 and elapsed < 1.0
    _report(1, ok, f"nine table entries within {worst:.2e} of the published "
                   f"values (tolerance 1e-3), runtime {elapsed:.3f} s")


# ---------------------------------------------------------------------------
# 2. generator open-loop values


def test_criterion_2_generator_open_loop():
    sys_, sets, x0 = generator()
    t0 = time.perf_counter()
    res = resilience_open(sys_, sets, x0, eps0=0.397, certify=False)
    t1 = time.perf_counter()
    eff_at_max = effort_open(sys_, sets, x0, res.value, certify=False)
    t2 = time.perf_counter()
    eff_zero = effort_open(sys_, sets, x0, 0.0, certify=False)
    t3 = time.perf_counter()
    checks = [
        abs(res.value - 0.0031) <= 0.0005,
        abs(eff_at_max.value - 0.397) <= 0.005,
        abs(eff_zero.value - 0.367) <= 0.005,
        (t1 - t0) < 60 and (t2 - t1) < 60 and (t3 - t2) < 60,
    ]
    _report(2, all(checks),
            f"resilience {res.value:.6f} (0.0031 +/- 0.0005), "
            f"effort at max {eff_at_max.value:.4f} (0.397 +/- 0.005), "
            f"effort at 0 {eff_zero.value:.4f} (0.367 +/- 0.005), "
            f"runtimes {t1 - t0:.2f}/{t2 - t1:.2f}/{t3 - t2:.2f} s")


# ---------------------------------------------------------------------------
# 3. robot open-loop values


def test_criterion_3_robot_open_loop():
    sys_, sets, x0, _ = robot()
    res = resilience_open(sys_, sets, x0, certify=False)
    eff_zero = effort_open(sys_, sets, x0, 0.0, certify=False)
    eff_max = effort_open(sys_, sets, x0, res.value, certify=False)
    checks = [
        abs(res.value - 0.0458) <= 0.002,
        abs(eff_zero.value - 0.25) <= 0.01,
        abs(eff_max.value - 0.39) <= 0.01,
    ]
    _report(3, all(checks),
            f"resilience {res.value:.6f} (0.0458 +/- 0.002), "
            f"effort(0) {eff_zero.value:.4f} (0.25 +/- 0.01), "
            f"effort at max {eff_max.value:.4f} (0.39 +/- 0.01)")


# ---------------------------------------------------------------------------
# 4. robot closed loop


def test_criterion_4_robot_closed_loop():
    sys_, sets, x0, _ = robot()
    res = resilience_closed(sys_, sets, x0)
    eff_zero = effort_closed(sys_, sets, x0, 0.0, certify=False)
    eff_max = effort_closed(sys_, sets, x0, res.value, certify=False)
    pt = pareto_closed(sys_, sets, x0, 0.5, 0.05)
    checks = [
        res.value >= 0.065,
        res.certificate is not None and res.certificate.satisfied,
        abs(eff_zero.value - 0.25) <= 0.01,
        abs(eff_max.value - 1.001) <= 0.05 * 1.001,
        abs(pt.mu - 0.053) <= 0.10 * 0.053,
        abs(pt.eps - 0.559) <= 0.10 * 0.559,
    ]
    _report(4, all(checks),
            f"resilience {res.value:.5f} (>= 0.065, vertex-certified "
            f"{res.certificate.satisfied}), effort(0) {eff_zero.value:.4f}, "
            f"effort at max {eff_max.value:.4f} (1.001 +/- 5%), pareto "
            f"({pt.mu:.4f}, {pt.eps:.4f}) vs (0.053, 0.559) +/- 10%")


# ---------------------------------------------------------------------------
# 5. certifier-backed maximality on random instances


def _random_box_instance(rng):
    n = int(rng.integers(1, 3))
    m = int(rng.integers(1, 3))
    N = int(rng.integers(1, 5))
    sys_ = LTVSystem(rng.normal(size=(N, n, n)) * 0.7,
                     rng.normal(size=(N, n, m)), N)
    width = 0.5 + rng.random()
    sets = compile_spec(parse(f"always[0,{N}](R)",
                              {"R": box([(-width, width)] * n)}, N))
    x0 = rng.uniform(-0.4, 0.4, size=n)
    return sys_, sets, x0, m, N


def test_criterion_5_oracle_maximality():
    rng = np.random.default_rng(2718)
    res_checked = eff_checked = 0
    failures = []
    while res_checked < 20 or eff_checked < 20:
        sys_, sets, x0, m, N = _random_box_instance(rng)
        probe = resilience_open(sys_, sets, x0, eps0=1.5, certify=False)
        if probe.status != "feasible" or not (1e-5 < probe.value < 1e3):
            continue
        blocks = open_loop_blocks(sys_, sets, x0)
        norms = l1_row_norms(blocks)
        mN = m * N

        if res_checked < 20:
            at_opt = certify_vertices(sys_, probe.controller, x0, probe.value,
                                      sets, eps=1.5, tol=1e-7)
            inflated = certify_vertices(sys_, probe.controller, x0,
                                        1.05 * probe.value, sets, eps=1.5)
            exceed = lp.solve(lp.LinearProgram(
                c=np.zeros(mN), A_ub=-blocks.F_v,
                b_ub=blocks.F_const - 1.05 * probe.value * norms,
                lower=np.full(mN, -1.5), upper=np.full(mN, 1.5)))
            if not at_opt.satisfied:
                failures.append("resilience optimum failed its own certificate")
            if inflated.satisfied:
                failures.append("computed controller survived 1.05 mu*")
            if exceed.status != "infeasible":
                failures.append("some controller is robust at 1.05 mu*")
            res_checked += 1

        if eff_checked < 20:
            mu0 = 0.5 * probe.value
            eff = effort_open(sys_, sets, x0, mu0, certify=False)
            if eff.value > 1e-6:
                at_eff = certify_vertices(sys_, eff.controller, x0, mu0, sets,
                                          eps=eff.value, tol=1e-7)
                shrunk = 0.95 * eff.value
                inner = lp.solve(lp.LinearProgram(
                    c=np.zeros(mN), A_ub=-blocks.F_v,
                    b_ub=blocks.F_const - mu0 * norms,
                    lower=np.full(mN, -shrunk), upper=np.full(mN, shrunk)))
                if not at_eff.satisfied:
                    failures.append("effort optimum failed its certificate")
                if inner.status != "infeasible":
                    failures.append("inner LP feasible at 0.95 eps*")
                eff_checked += 1
    _report(5, not failures,
            f"{res_checked} resilience and {eff_checked} effort optima "
            f"certified maximal/minimal"
            + (f"; failures: {failures[:3]}" if failures else ""))


# ---------------------------------------------------------------------------
# 6. the two robust-row forms agree


def test_criterion_6_form_equivalence():
    rng = np.random.default_rng(314)
    checked = 0
    worst = 0.0
    while checked < 50:
        sys_, sets, x0, m, N = _random_box_instance(rng)
        a = resilience_open(sys_, sets, x0, eps0=2.0, form="l1",
                            certify=False)
        b = resilience_open(sys_, sets, x0, eps0=2.0, form="multiplier",
                            certify=False)
        if a.status != "feasible" or not np.isfinite(a.value):
            continue
        worst = max(worst, abs(a.value - b.value) / (1.0 + abs(a.value)))
        e1 = effort_open(sys_, sets, x0, 0.5 * a.value, form="l1",
                         certify=False)
        e2 = effort_open(sys_, sets, x0, 0.5 * a.value, form="multiplier",
                         certify=False)
        worst = max(worst, abs(e1.value - e2.value) / (1.0 + abs(e1.value)))
        checked += 1
    _report(6, worst <= 1e-7,
            f"l1 and multiplier forms within {worst:.2e} on {checked} "
            f"instances (tolerance 1e-7)")


# ---------------------------------------------------------------------------
# 7. scenario conservatism and the full nonlinear pipeline


def test_criterion_7_scenario_conservatism_and_pipeline():
    sys_, sets, x0, _ = robot()
    eps0 = 0.3875
    exact_res = resilience_open(sys_, sets, x0, eps0=eps0, certify=False)
    warm = np.concatenate([[exact_res.value],
                           exact_res.controller.inputs.ravel()])
    template = open_loop_template(6, 2, 2)
    objective = ScenarioObjective(w1=1.0, w2=0.0, eps0=eps0)

    medians = []
    below = 0
    for M in (10, 100, 1000):
        gaps = []
        for seed in range(20):
            scen = sample_disturbances(M, 6, 2, seed=seed)
            cert = solve_scenario(
                sys_, sets, x0, template, scen, objective,
                SolveOptions(restarts=1, presamples=0, lifted_starts=0,
                             scale=1.0, seed=seed, refine=False,
                             extra_starts=(warm,)))
            gap = cert.mu - exact_res.value
            below += gap < -1e-9
            gaps.append(gap)
        medians.append(float(np.median(gaps)))
    shrinking = medians[0] > medians[1] > medians[2] > 0

    acc = make_nonlinear_system("acc", 4)
    b1 = NormBall([58.75, 16.4], math.sqrt(0.1), name="B1")
    b2 = NormBall([57.75, 15.6], math.sqrt(0.1), name="B2")
    acc_sets = compile_spec(parse("next^3 (B1) & next^4 (B2)",
                                  {"B1": b1, "B2": b2}, 4))
    acc_x0 = np.array([60.0, 15.0])
    cert = run_pipeline(
        acc, acc_sets, acc_x0, linear_template(2, 1),
        sample_disturbances(10, 4, 2, seed=0),
        ScenarioObjective(w1=1.0, w2=0.0, eps0=2687.9), 1e-2,
        options=SolveOptions(restarts=8, presamples=256, scale=1000.0,
                             seed=0),
        fresh=sample_disturbances(10_000, 4, 2, seed=123))
    pipeline_ok = (cert.mu > 0 and cert.s_M <= 10
                   and cert.violation_rate <= cert.bound)

    ok = below == 0 and shrinking and pipeline_ok
    _report(7, ok,
            f"scenario mu never fell below exact over 60 runs ({below} "
            f"exceptions); median gaps {medians[0]:.5f} > {medians[1]:.5f} "
            f"> {medians[2]:.5f}; nonlinear pipeline mu {cert.mu:.5f} > 0, "
            f"support {cert.s_M} <= 10, fresh violation "
            f"{cert.violation_rate:.4f} <= bound {cert.bound:.4f}")


# ---------------------------------------------------------------------------
# 8. spec compiler against direct semantics


def _interpret(formula, states) -> float:
    total = np.inf
    for node in formula.conjuncts:
        region = formula.regions[node.region]
        if isinstance(node, Atom):
            val = float(region.margin(states[0]))
        elif isinstance(node, Next):
            val = float(region.margin(states[node.step]))
        elif isinstance(node, Always):
            val = min(float(region.margin(states[k]))
                      for k in range(node.lo, node.hi + 1))
        else:
            val = max(float(region.margin(states[k]))
                      for k in range(node.lo, node.hi + 1))
        total = min(total, val)
    return total


def test_criterion_8_spec_compiler():
    rng = np.random.default_rng(99)
    regions = {
        "P": box([(-1.0, 1.0), (-1.0, 1.0)]),
        "Q": box([(0.0, 2.0), (-0.5, 0.5)]),
        "S": NormBall([0.0, 0.0], 1.5),
        "K": NormBall([0.5, 0.5], 0.75, complement=True),
    }
    names = list(regions)
    mismatches = 0
    for _ in range(200):
        N = int(rng.integers(1, 7))
        parts = []
        for _ in range(int(rng.integers(1, 4))):
            name = names[rng.integers(len(names))]
            op = int(rng.integers(4))
            if op == 0:
                parts.append(name)
            elif op == 1:
                parts.append(f"next^{rng.integers(N + 1)}({name})")
            else:
                lo = int(rng.integers(N + 1))
                hi = int(rng.integers(lo, N + 1))
                word = "always" if op == 2 else "eventually"
                parts.append(f"{word}[{lo},{hi}]({name})")
        formula = parse(" & ".join(parts), regions, N)
        states = rng.normal(scale=1.2, size=(N + 1, 2))
        got = margin(states, compile_spec(formula))
        want = _interpret(formula, states)
        if abs(got - want) > 1e-9 or (got < 0) != (want < 0):
            mismatches += 1

    # the reach-avoid formula of the planar-robot study must stack, per
    # step, exactly the boxes active at that step (upper row before lower)
    _, sets, _, formula = robot()
    R1 = (np.array([[1.0, 0], [-1, 0], [0, 1], [0, -1]]),
          np.array([0.3, 0.3, 1.25, -0.6]))
    R2 = (np.array([[1.0, 0], [-1, 0], [0, 1], [0, -1]]),
          np.array([1.5, -0.8, 1.75, -1.2]))
    R3 = (np.array([[1.0, 0], [-1, 0], [0, 1], [0, -1]]),
          np.array([1.7, 1.0, 2.0, 0.0]))
    expected = {
        0: R3, 1: R3, 3: R3,
        2: (np.vstack([R1[0], R3[0]]), np.concatenate([R1[1], R3[1]])),
    }
    for k in (4, 5, 6):
        expected[k] = (np.vstack([R2[0], R3[0]]),
                       np.concatenate([R2[1], R3[1]]))
    stacks_ok = len(formula.conjuncts) == 3 and sets.polytopic
    for k in range(7):
        G, H = sets.stacked(k)
        Ge, He = expected[k]
        stacks_ok &= np.array_equal(G, Ge) and np.array_equal(H, He)

    ok = mismatches == 0 and stacks_ok
    _report(8, ok,
            f"200 random formula/trajectory margins match direct semantics "
            f"({mismatches} mismatches); reach-avoid study formula stacks "
            f"the documented per-step polytopes: {stacks_ok}")


# ---------------------------------------------------------------------------
# 9. byte-identical records across repeated runs


def _strip_timing(record: dict) -> dict:
    return {k: v for k, v in record.items() if k != "wall_time_s"}


def _canonical(record: dict) -> bytes:
    return json.dumps(_strip_timing(record), sort_keys=True).encode()


def test_criterion_9_determinism(tmp_path):
    toy_problem = tmp_path / "toy.toml"
    toy_problem.write_text("""
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

[query.scenario]
M = 10
beta = 1e-1
seed = 3
fresh = 100

[query.search]
restarts = 2
presamples = 8
lifted_starts = 0
""")
    pairs = []
    for label, argv in (
        ("exact resilience", ["resilience", "--problem", "robot_open"]),
        ("exact effort", ["effort", "--problem", "robot_open_maxres"]),
        ("seeded scenario", ["scenario", "--problem", str(toy_problem)]),
        ("risk bound", ["risk-bound", "--k", "4", "--M", "10",
                        "--beta", "1e-2"]),
    ):
        records = []
        for run in (1, 2):
            out = tmp_path / f"{label.replace(' ', '_')}_{run}.json"
            code = cli.main(argv + ["--out", str(out), "--quiet"])
            assert code == 0, (label, code)
            records.append(json.loads(out.read_text()))
        pairs.append((label, _canonical(records[0]) == _canonical(records[1])))

    # the library route must agree byte for byte as well
    sys_, sets, x0, _ = robot()
    scen = sample_disturbances(30, 6, 2, seed=2)
    opts = SolveOptions(restarts=2, presamples=8, seed=2)
    objective = ScenarioObjective(w1=1.0, w2=0.0, eps0=0.3875)
    template = open_loop_template(6, 2, 2)
    c1 = solve_scenario(sys_, sets, x0, template, scen, objective, opts)
    c2 = solve_scenario(sys_, sets, x0, template, scen, objective, opts)
    pairs.append(("library scenario",
                  json.dumps(c1.to_dict(), sort_keys=True)
                  == json.dumps(c2.to_dict(), sort_keys=True)))

    bad = [label for label, same in pairs if not same]
    _report(9, not bad,
            f"{len(pairs)} query kinds byte-identical across two runs "
            f"(timing fields excluded)"
            + (f"; divergent: {bad}" if bad else ""))
