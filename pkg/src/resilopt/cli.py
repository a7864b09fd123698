"""Command-line frontend.

Reads declarative TOML problem files, dispatches to the exact LP pipeline
or the sampling pipeline, and emits self-contained machine-readable result
records (JSON, or CSV for tabular outputs).  Outcomes map to exit codes:
0 for a computed optimum, 2 when the query is infeasible (including the
nominal-infeasible zero branch, distinguished in the record), 1 for input
or numeric errors.  Output files are written atomically.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
import time

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:          # Python 3.10
    import tomli as tomllib

from resilopt import __version__, exact, farkas, specs
from resilopt import scenario as scn
from resilopt.errors import (
    InfeasibleAtMuError,
    NoFeasiblePointError,
    ResiloptError,
    SpecSyntaxError,
)
from resilopt.model import (
    LTVSystem,
    LinearFeedback,
    OpenLoopSequence,
    PolynomialFeedback,
    make_nonlinear_system,
    rollout_batch,
)

_PROBLEM_DIR = os.path.join(os.path.dirname(__file__), "problems")


class SchemaError(ValueError):
    """Problem-file violation, reported with the offending field path."""


# ---------------------------------------------------------------------------
# problem loading


def _need(table: dict, key: str, path: str):
    if key not in table:
        raise SchemaError(f"{path}.{key}: required field is missing")
    return table[key]


def _build_region(name: str, node: dict):
    path = f"regions.{name}"
    if not isinstance(node, dict):
        raise SchemaError(f"{path}: expected a table")
    kind = node.get("kind", "box")
    if kind == "box":
        bounds = _need(node, "bounds", path)
        try:
            return specs.box([tuple(map(float, b)) for b in bounds], name=name)
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{path}.bounds: {exc}") from exc
    if kind == "ball":
        dims = node.get("dims")
        return specs.NormBall(
            center=_need(node, "center", path),
            radius=float(_need(node, "radius", path)),
            norm=node.get("norm", "euclidean"),
            dims=None if dims is None else tuple(int(d) for d in dims),
            complement=bool(node.get("complement", False)),
            name=name,
        )
    raise SchemaError(f"{path}.kind: unknown region kind '{kind}'")


def _build_system(node: dict, horizon: int):
    kind = node.get("kind", "ltv")
    if kind == "ltv":
        A = np.asarray(_need(node, "A", "system"), dtype=float)
        B = np.asarray(_need(node, "B", "system"), dtype=float)
        return LTVSystem(A, B, horizon)
    if kind == "nonlinear":
        return make_nonlinear_system(_need(node, "model", "system"), horizon,
                                     node.get("params"))
    raise SchemaError(f"system.kind: unknown system kind '{kind}'")


class Problem:
    """Parsed problem file: system, compiled spec, initial state, query."""

    def __init__(self, raw: dict, path: str = "<memory>"):
        self.raw = raw
        self.path = path
        horizon = int(_need(raw, "horizon", "problem"))
        self.system = _build_system(_need(raw, "system", "problem"), horizon)
        regions_node = _need(raw, "regions", "problem")
        regions = {name: _build_region(name, node)
                   for name, node in regions_node.items()}
        formula = specs.parse(_need(raw, "spec", "problem"), regions, horizon)
        self.sets = specs.compile(formula)
        self.x0 = np.asarray(_need(raw, "x0", "problem"), dtype=float)
        if self.x0.shape != (self.system.n,):
            raise SchemaError(
                f"x0: expected {self.system.n} coordinates, got {self.x0.shape}")
        self.query = raw.get("query", {})


def load_problem(path: str) -> Problem:
    name = path
    if not os.path.exists(name) and not name.endswith(".toml"):
        bundled = os.path.join(_PROBLEM_DIR, name + ".toml")
        if os.path.exists(bundled):
            name = bundled
    try:
        with open(name, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise SchemaError(f"problem file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    return Problem(raw, path=name)


def bundled_case_studies() -> list[str]:
    """Paths of the problem files shipped with the package."""
    return sorted(
        os.path.join(_PROBLEM_DIR, f)
        for f in os.listdir(_PROBLEM_DIR) if f.endswith(".toml"))


# ---------------------------------------------------------------------------
# record plumbing


def _controller_dict(c) -> dict | None:
    if c is None:
        return None
    if isinstance(c, OpenLoopSequence):
        return {"kind": "open-loop", "inputs": c.inputs.tolist()}
    if isinstance(c, LinearFeedback):
        return {"kind": "linear", "alpha1": np.asarray(c.alpha1).tolist(),
                "alpha2": np.asarray(c.alpha2).tolist()}
    if isinstance(c, PolynomialFeedback):
        return {"kind": "polynomial", "degree": int(c.degree),
                "coefficients": np.asarray(c.coefficients).tolist()}
    return {"kind": type(c).__name__}


def _controller_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "open-loop":
        return OpenLoopSequence(np.asarray(d["inputs"], dtype=float))
    if kind == "linear":
        return LinearFeedback(np.asarray(d["alpha1"], dtype=float),
                              np.asarray(d["alpha2"], dtype=float))
    if kind == "polynomial":
        return PolynomialFeedback(int(d["degree"]),
                                  np.asarray(d["coefficients"], dtype=float))
    raise SchemaError(f"record.controller.kind: cannot rebuild '{kind}'")


def _json_safe(value):
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return _json_safe(value.tolist())
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return {math.inf: "inf", -math.inf: "-inf"}.get(v, v) \
            if math.isinf(v) else v
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    return value


def _record(command: str, problem: Problem | None, seed, started: float,
            **payload) -> dict:
    rec = {
        "tool": {"name": "resilopt", "version": __version__},
        "command": command,
        "seed": seed,
        "workers": int(os.environ.get("RESILOPT_WORKERS", "1")),
        "wall_time_s": round(time.perf_counter() - started, 6),
    }
    if problem is not None:
        rec["problem"] = {"path": problem.path, "content": problem.raw}
    rec.update(payload)
    return _json_safe(rec)


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".resilopt-",
                               suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _rows_to_csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _flatten(prefix: str, value, rows: list) -> None:
    if isinstance(value, dict):
        for k in sorted(value):
            _flatten(f"{prefix}.{k}" if prefix else str(k), value[k], rows)
    elif isinstance(value, list):
        rows.append([prefix, json.dumps(value)])
    else:
        rows.append([prefix, value])


def _render(record: dict, fmt: str, table: tuple | None = None) -> str:
    if fmt == "json":
        return json.dumps(record, indent=2, sort_keys=True) + "\n"
    # csv: a declared table renders as columns, anything else as key/value
    if table is not None:
        header, rows = table
        return _rows_to_csv(header, rows)
    rows: list[list] = []
    _flatten("", record, rows)
    return _rows_to_csv(["field", "value"], rows)


def _deliver(record: dict, args, summary: str,
             table: tuple | None = None) -> None:
    text = _render(record, args.format, table)
    if args.out:
        _atomic_write(args.out, text)
        if not args.quiet:
            print(summary)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# shared query plumbing


def _require_ltv(problem: Problem, command: str) -> None:
    if not isinstance(problem.system, LTVSystem):
        raise SchemaError(
            f"system.kind: the '{command}' command solves exact LPs and "
            "needs an ltv system; use the scenario command instead")


def _search_config(query: dict, seed) -> exact.SearchConfig:
    node = dict(query.get("search", {}))
    if seed is not None:
        node["seed"] = seed
    known = {f.name for f in exact.SearchConfig.__dataclass_fields__.values()}
    bad = set(node) - known
    if bad:
        raise SchemaError(f"query.search.{sorted(bad)[0]}: unknown option")
    return exact.SearchConfig(**node)


def _solve_options(query: dict, seed) -> scn.SolveOptions:
    node = dict(query.get("search", {}))
    if seed is not None:
        node["seed"] = seed
    known = {f.name for f in scn.SolveOptions.__dataclass_fields__.values()}
    bad = set(node) - known
    if bad:
        raise SchemaError(f"query.search.{sorted(bad)[0]}: unknown option")
    return scn.SolveOptions(**node)


def _template(query: dict, system) -> scn.ControllerTemplate:
    kind = query.get("controller", "linear")
    if kind in ("open", "open-loop"):
        return scn.open_loop_template(system.N, system.n, system.m)
    if kind == "linear":
        return scn.linear_template(system.n, system.m)
    if kind == "polynomial":
        return scn.polynomial_template(system.n, system.m,
                                       int(query.get("degree", 2)))
    raise SchemaError(f"query.controller: unknown template '{kind}'")


def _metric_payload(res: exact.MetricResult, metric: str) -> dict:
    return {
        "metric": metric,
        "status": res.status,
        "value": res.value,
        "companion": res.companion,
        "controller": _controller_dict(res.controller),
        "certificate": None if res.certificate is None
        else res.certificate.to_dict(),
        "note": res.note,
    }


_EXIT_BY_STATUS = {"feasible": 0, "nominal-infeasible": 2, "infeasible": 2}


# ---------------------------------------------------------------------------
# subcommands


def _cmd_resilience(args) -> int:
    started = time.perf_counter()
    problem = load_problem(args.problem)
    _require_ltv(problem, "resilience")
    q = problem.query
    eps0 = float(q.get("eps0", math.inf))
    kind = q.get("controller", "open")
    if kind in ("open", "open-loop"):
        res = exact.resilience_open(problem.system, problem.sets, problem.x0,
                                    eps0=eps0)
    elif kind == "linear":
        res = exact.resilience_closed(problem.system, problem.sets,
                                      problem.x0, eps0=eps0,
                                      search=_search_config(q, args.seed))
    else:
        raise SchemaError(
            f"query.controller: exact resilience supports open|linear, "
            f"got '{kind}'")
    record = _record("resilience", problem, args.seed, started,
                     **_metric_payload(res, "resilience"))
    _deliver(record, args, f"resilience = {res.value:.6g} ({res.status})")
    return _EXIT_BY_STATUS.get(res.status, 0)


def _cmd_effort(args) -> int:
    started = time.perf_counter()
    problem = load_problem(args.problem)
    _require_ltv(problem, "effort")
    q = problem.query
    mu0 = float(q.get("mu0", 0.0)) if args.mu is None else args.mu
    kind = q.get("controller", "open")
    try:
        if kind in ("open", "open-loop"):
            res = exact.effort_open(problem.system, problem.sets, problem.x0,
                                    mu0)
        elif kind == "linear":
            res = exact.effort_closed(problem.system, problem.sets,
                                      problem.x0, mu0,
                                      search=_search_config(q, args.seed))
        else:
            raise SchemaError(
                f"query.controller: exact effort supports open|linear, "
                f"got '{kind}'")
    except InfeasibleAtMuError as exc:
        record = _record("effort", problem, args.seed, started,
                         metric="effort", status="infeasible", mu0=mu0,
                         detail=str(exc))
        _deliver(record, args, f"effort infeasible at mu0={mu0:.6g}")
        return 2
    record = _record("effort", problem, args.seed, started, mu0=mu0,
                     **_metric_payload(res, "effort"))
    _deliver(record, args, f"effort = {res.value:.6g} ({res.status})")
    return _EXIT_BY_STATUS.get(res.status, 0)


def emit_frontier(points, path: str | None, fmt: str = "csv") -> str:
    """Render Pareto points as a table sorted by eps ascending.

    Returns the rendered text; also writes it atomically when ``path``
    is given.  Controller parameters live in the JSON form; CSV rows
    reference them by index.
    """
    order = sorted(range(len(points)), key=lambda i: points[i].eps)
    if fmt == "json":
        doc = [{"w1": p.w1, "w2": p.w2, "mu": p.mu, "eps": p.eps,
                "objective": p.objective, "controller_ref": f"point-{i}",
                "controller": _controller_dict(p.controller)}
               for i, p in ((i, points[i]) for i in order)]
        text = json.dumps(_json_safe(doc), indent=2, sort_keys=True) + "\n"
    else:
        header = ["w1", "w2", "mu", "eps", "objective", "controller_ref"]
        rows = [[points[i].w1, points[i].w2, points[i].mu, points[i].eps,
                 points[i].objective, f"point-{i}"] for i in order]
        text = _rows_to_csv(header, rows)
    if path:
        _atomic_write(path, text)
    return text


def _cmd_pareto(args) -> int:
    started = time.perf_counter()
    problem = load_problem(args.problem)
    _require_ltv(problem, "pareto")
    q = problem.query
    weights = q.get("weights")
    if weights is None:
        weights = [[float(q.get("w1", 1.0)), float(q.get("w2", 0.0))]]
    kind = q.get("controller", "open")
    eps_cap = q.get("eps_cap")
    mu_fix = q.get("mu_fix")
    points = []
    for pair in weights:
        w1, w2 = (float(pair[0]), float(pair[1]))
        if kind in ("open", "open-loop"):
            points.append(exact.pareto_open(
                problem.system, problem.sets, problem.x0, w1, w2,
                eps_cap=eps_cap, mu_fix=mu_fix))
        elif kind == "linear":
            points.append(exact.pareto_closed(
                problem.system, problem.sets, problem.x0, w1, w2,
                search=_search_config(q, args.seed),
                eps_cap=eps_cap, mu_fix=mu_fix))
        else:
            raise SchemaError(
                f"query.controller: exact pareto supports open|linear, "
                f"got '{kind}'")
    order = sorted(range(len(points)), key=lambda i: points[i].eps)
    record = _record(
        "pareto", problem, args.seed, started, status="feasible",
        frontier=[{"w1": points[i].w1, "w2": points[i].w2,
                   "mu": points[i].mu, "eps": points[i].eps,
                   "objective": points[i].objective,
                   "controller_ref": f"point-{i}",
                   "controller": _controller_dict(points[i].controller)}
                  for i in order])
    header = ["w1", "w2", "mu", "eps", "objective", "controller_ref"]
    rows = [[points[i].w1, points[i].w2, points[i].mu, points[i].eps,
             points[i].objective, f"point-{i}"] for i in order]
    _deliver(record, args, f"pareto frontier with {len(points)} point(s)",
             table=(header, rows))
    return 0


def _cmd_scenario(args) -> int:
    started = time.perf_counter()
    problem = load_problem(args.problem)
    q = problem.query
    node = q.get("scenario", {})
    M = int(node.get("M", 100))
    beta = float(node.get("beta", 1e-2))
    seed = args.seed if args.seed is not None else int(node.get("seed", 0))
    distribution = node.get("distribution", "uniform")
    system = problem.system
    template = _template(q, system)
    mu0, eps0 = q.get("mu0"), q.get("eps0")
    objective = scn.ScenarioObjective(
        w1=float(q.get("w1", 1.0)), w2=float(q.get("w2", 0.0)),
        mu0=None if mu0 is None else float(mu0),
        eps0=None if eps0 is None else float(eps0))
    options = _solve_options(q, seed)
    scenarios = scn.sample_disturbances(M, system.N, system.n, seed=seed,
                                        distribution=distribution)
    fresh = None
    fresh_M = int(node.get("fresh", 0))
    if fresh_M > 0:
        fresh = scn.sample_disturbances(
            fresh_M, system.N, system.n,
            seed=int(node.get("fresh_seed", seed + 1)),
            distribution=distribution)
    try:
        cert = scn.run_pipeline(system, problem.sets, problem.x0, template,
                                scenarios, objective, beta, options=options,
                                fresh=fresh)
    except NoFeasiblePointError as exc:
        record = _record("scenario", problem, seed, started,
                         status="no-feasible-point", detail=str(exc))
        _deliver(record, args, "scenario: no feasible point")
        return 2
    record = _record("scenario", problem, seed, started, status="feasible",
                     certificate=cert.to_dict())
    _deliver(record, args,
             f"scenario mu={cert.mu:.6g} eps={cert.eps:.6g} "
             f"s_M={cert.s_M} bound={cert.bound:.4f}")
    return 0


def _cmd_risk_bound(args) -> int:
    started = time.perf_counter()
    value = scn.risk_bound(args.k, args.M, args.beta)
    record = _record("risk-bound", None, None, started, status="ok",
                     k=args.k, M=args.M, beta=args.beta, bound=value)
    if args.out:
        _atomic_write(args.out, _render(record, args.format))
    if not args.quiet or not args.out:
        print(f"{value:.3f}")
    return 0


def _cmd_rollout(args) -> int:
    started = time.perf_counter()
    problem = load_problem(args.problem)
    system = problem.system
    if args.record:
        with open(args.record) as fh:
            controller = _controller_from_dict(
                json.load(fh).get("controller") or {})
    else:
        controller = OpenLoopSequence(np.zeros((system.N, system.m)))
    mu = args.mu or 0.0
    samples = max(1, args.samples)
    if mu > 0 and samples > 1:
        seed = args.seed if args.seed is not None else 0
        delta = scn.sample_disturbances(samples, system.N, system.n,
                                        seed=seed).samples
    else:
        delta = np.zeros((samples, system.N, system.n))
    states, inputs = rollout_batch(system, controller, problem.x0,
                                   mu * delta)
    margins = specs.margin_batch(states, problem.sets)
    record = _record(
        "rollout", problem, args.seed, started, status="ok", mu=mu,
        controller=_controller_dict(controller),
        margins=margins.tolist(),
        trajectories=[{"states": states[s].tolist(),
                       "inputs": inputs[s].tolist()}
                      for s in range(samples)])
    header = (["sample", "k"] + [f"x{i}" for i in range(system.n)]
              + [f"u{i}" for i in range(system.m)])
    rows = []
    for s in range(samples):
        for k in range(system.N + 1):
            u = inputs[s][k].tolist() if k < system.N else [""] * system.m
            rows.append([s, k] + states[s][k].tolist() + u)
    _deliver(record, args,
             f"rolled out {samples} trajectories, "
             f"worst margin {margins.min():.6g}", table=(header, rows))
    return 0


def _cmd_certify(args) -> int:
    started = time.perf_counter()
    problem = load_problem(args.problem)
    q = problem.query
    if args.record:
        with open(args.record) as fh:
            controller = _controller_from_dict(
                json.load(fh).get("controller") or {})
    else:
        _require_ltv(problem, "certify")
        kind = q.get("controller", "open")
        eps0 = float(q.get("eps0", math.inf))
        if kind in ("open", "open-loop"):
            res = exact.resilience_open(problem.system, problem.sets,
                                        problem.x0, eps0=eps0, certify=False)
        else:
            res = exact.resilience_closed(problem.system, problem.sets,
                                          problem.x0, eps0=eps0,
                                          search=_search_config(q, args.seed),
                                          certify=False)
        if res.controller is None:
            record = _record("certify", problem, args.seed, started,
                             status=res.status, mu=args.mu)
            _deliver(record, args, f"no controller to certify ({res.status})")
            return 2
        controller = res.controller
    eps = q.get("eps0")
    cert = farkas.certify_vertices(problem.system, controller, problem.x0,
                                   args.mu, problem.sets,
                                   eps=None if eps is None else float(eps))
    record = _record("certify", problem, args.seed, started,
                     status="satisfied" if cert.satisfied else "violated",
                     mu=args.mu, controller=_controller_dict(controller),
                     certificate=cert.to_dict())
    _deliver(record, args,
             f"certify mu={args.mu:.6g}: "
             f"{'satisfied' if cert.satisfied else 'violated'} "
             f"(worst margin {cert.worst_margin:.6g})")
    return 0 if cert.satisfied else 2


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(sub: argparse.ArgumentParser, problem: bool = True) -> None:
    if problem:
        sub.add_argument("--problem", required=True,
                         help="problem file path or bundled problem name")
    sub.add_argument("--out", help="write the result record to this path")
    sub.add_argument("--format", choices=("json", "csv"), default="json")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the problem file's seed")
    sub.add_argument("--quiet", action="store_true",
                     help="suppress the one-line summary")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resilopt",
        description="Resilience, effort, and trade-off metrics for "
                    "discrete-time systems under finite-horizon "
                    "specifications.")
    parser.add_argument("--version", action="version",
                        version=f"resilopt {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    for name, fn in (("resilience", _cmd_resilience),
                     ("effort", _cmd_effort),
                     ("pareto", _cmd_pareto),
                     ("scenario", _cmd_scenario)):
        sub = subs.add_parser(name)
        _add_common(sub)
        if name == "effort":
            sub.add_argument("--mu", type=float, default=None,
                             help="override the problem file's mu0")
        sub.set_defaults(fn=fn)

    sub = subs.add_parser("risk-bound")
    sub.add_argument("--k", type=int, required=True)
    sub.add_argument("--M", type=int, required=True)
    sub.add_argument("--beta", type=float, required=True)
    _add_common(sub, problem=False)
    sub.set_defaults(fn=_cmd_risk_bound)

    sub = subs.add_parser("rollout")
    _add_common(sub)
    sub.add_argument("--record", help="result record supplying the controller")
    sub.add_argument("--mu", type=float, default=0.0)
    sub.add_argument("--samples", type=int, default=1)
    sub.set_defaults(fn=_cmd_rollout)

    sub = subs.add_parser("certify")
    _add_common(sub)
    sub.add_argument("--record", help="result record supplying the controller")
    sub.add_argument("--mu", type=float, required=True)
    sub.set_defaults(fn=_cmd_certify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SpecSyntaxError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ResiloptError as exc:
        # numeric failures carry their origin so records stay diagnosable
        print(f"error [{type(exc).__module__}.{type(exc).__name__}]: {exc}",
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
