"""Exact resilience/effort/trade-off computation for linear systems.

Open-loop queries reduce to a single linear program.  Closed-loop queries
fix the feedback gain alpha1 in an outer derivative-free search (multi-start
Nelder-Mead); for each candidate gain the remaining decisions (mu or eps,
and the feedback offset alpha2) form a linear program, so the inner values
are exact and the reported closed-loop numbers are certified bounds: lower
bounds for resilience and the trade-off, upper bounds for effort.

Every robust constraint can be assembled in two equivalent shapes: the
production l1 row-norm reduction and the explicit Farkas-multiplier form
(``form="multiplier"``), kept solely so the equivalence is testable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize

from resilopt import lp, specs
from resilopt.errors import (
    InfeasibleAtMuError,
    UnboundedObjectiveError,
)
from resilopt.farkas import (
    FarkasBlocks,
    VertexCertificate,
    certify_vertices,
    closed_loop_blocks,
    l1_row_norms,
    open_loop_blocks,
)
from resilopt.model import LinearFeedback, LTVSystem, OpenLoopSequence

UNBOUNDED_PROBE = 1e6


@dataclass
class SearchConfig:
    """Outer-search settings for the closed-loop queries.

    ``restarts`` Nelder-Mead runs are seeded from alpha1 = 0, any
    ``extra_starts``, and the best of ``presamples`` random gains drawn
    from a seeded generator with standard deviation ``scale``.
    """

    restarts: int = 8
    presamples: int = 64
    scale: float = 1.0
    max_iter: int = 500
    tol: float = 1e-6
    seed: int = 0
    simplex_step: float = 0.25
    extra_starts: tuple = ()


@dataclass
class MetricResult:
    """Outcome of a resilience or effort query.

    ``value`` is mu for resilience and eps for effort.  ``companion`` is
    the other quantity at the optimum: the realized input bound for a
    resilience query, the queried disturbance level for an effort query.
    ``status`` separates a computed zero from impossibility: with
    "nominal-infeasible" no controller in the template satisfies the
    specification even without disturbance and there is no controller.
    """

    value: float
    status: str
    controller: LinearFeedback | OpenLoopSequence | None
    companion: float | None
    certificate: VertexCertificate | None
    note: str | None = None


@dataclass
class ParetoPoint:
    w1: float
    w2: float
    mu: float
    eps: float
    objective: float
    controller: LinearFeedback | OpenLoopSequence | None


class _UnboundedInner(Exception):
    pass


# ---------------------------------------------------------------------------
# robust-row assembly (l1 and multiplier forms)


def _robust_rows(E: np.ndarray, F_const: np.ndarray, F_lin: np.ndarray,
                 n_base: int, mu_col: int | None, mu_fixed: float, form: str):
    """Rows enforcing  mu * sup_{||y||inf<=1} E_i y  <=  F_const_i + F_lin_i z
    over base decision vector z (mu itself is z[mu_col] when not fixed).

    Returns (A_ub, b_ub, A_eq, b_eq, n_extra): the inequality rows always
    span the base variables first, then ``n_extra`` nonnegative multiplier
    columns (empty for the l1 form).
    """
    R, W = E.shape
    if form == "l1":
        norms = np.abs(E).sum(axis=1)
        A = -F_lin.copy()
        b = F_const.copy()
        if mu_col is None:
            b = b - mu_fixed * norms
        else:
            A[:, mu_col] += norms
        return A, b, np.zeros((0, n_base)), np.zeros(0), 0
    if form != "multiplier":
        raise ValueError(f"unknown robust-row form '{form}'")
    # explicit Farkas multipliers: row i gets P_i = [p+_i, p-_i] >= 0 with
    # p+ - p- = mu E_i and sum(P_i) <= F_i
    n_extra = 2 * R * W
    A_eq = np.zeros((R * W, n_base + n_extra))
    b_eq = np.zeros(R * W)
    A_ub = np.zeros((R, n_base + n_extra))
    b_ub = F_const.copy()
    A_ub[:, :n_base] = -F_lin
    for i in range(R):
        plus = n_base + 2 * i * W
        minus = plus + W
        rows = slice(i * W, (i + 1) * W)
        A_eq[rows, plus:plus + W] = np.eye(W)
        A_eq[rows, minus:minus + W] = -np.eye(W)
        if mu_col is None:
            b_eq[rows] = mu_fixed * E[i]
        else:
            A_eq[rows, mu_col] = -E[i]
        A_ub[i, plus:plus + W] = 1.0
        A_ub[i, minus:minus + W] = 1.0
    return A_ub, b_ub, A_eq, b_eq, n_extra


def _assemble(c, A_rob, b_rob, A_eq, b_eq, n_extra, extra_ub=None,
              lower=None, upper=None, sense="max"):
    """Splice robust rows, plain rows and multiplier bounds into one LP."""
    n_base = len(c)
    cols = n_base + n_extra
    c_full = np.zeros(cols)
    c_full[:n_base] = c
    rows = [A_rob]
    rhs = [b_rob]
    if extra_ub is not None and len(extra_ub[1]):
        Ax = np.zeros((extra_ub[0].shape[0], cols))
        Ax[:, :n_base] = extra_ub[0]
        rows.append(Ax)
        rhs.append(extra_ub[1])
    lo = np.zeros(cols)
    hi = np.full(cols, np.inf)
    lo[:n_base] = lower if lower is not None else 0.0
    hi[:n_base] = upper if upper is not None else np.inf
    return lp.LinearProgram(
        c=c_full,
        A_ub=np.vstack(rows), b_ub=np.concatenate(rhs),
        A_eq=A_eq if len(b_eq) else None, b_eq=b_eq if len(b_eq) else None,
        lower=lo, upper=hi, sense=sense)


# ---------------------------------------------------------------------------
# open-loop queries (single LPs)


def _input_box_rows(n_base: int, eps_col: int, v0: int, mN: int):
    """Rows  +-v_j - eps <= 0  tying the stacked inputs to the bound."""
    A = np.zeros((2 * mN, n_base))
    for j in range(mN):
        A[2 * j, v0 + j] = 1.0
        A[2 * j + 1, v0 + j] = -1.0
        A[2 * j:2 * j + 2, eps_col] = -1.0
    return A, np.zeros(2 * mN)


def _mu_supported(blocks: FarkasBlocks, at_v: np.ndarray | None = None,
                  F: np.ndarray | None = None) -> float:
    """Largest mu the given row values support: min_i F_i / ||E_i||_1."""
    norms = np.abs(blocks.E).sum(axis=1)
    if F is None:
        F = blocks.F_const + (blocks.F_v @ at_v if blocks.F_v is not None else 0.0)
    active = norms > 1e-12
    if not active.any():
        return math.inf
    return float(max(0.0, (F[active] / norms[active]).min()))


def resilience_open(system: LTVSystem, sets: specs.TimedSets, x0,
                    eps0: float = math.inf, *, form: str = "l1",
                    certify: bool = True) -> MetricResult:
    """Largest disturbance bound an open-loop input sequence can absorb.

    Solves  max mu  s.t.  mu*||E_i||_1 <= F_i(x0, v),  ||v_k||_inf <= eps0.
    """
    blocks = open_loop_blocks(system, sets, x0)
    mN = system.m * system.N
    n_base = 1 + mN

    def build(mu_cap=None):
        A, b, A_eq, b_eq, n_extra = _robust_rows(
            blocks.E, blocks.F_const, _with_mu_col(blocks.F_v, n_base), n_base, 0, 0.0, form)
        c = np.zeros(n_base)
        c[0] = 1.0
        lower = np.full(n_base, -eps0 if np.isfinite(eps0) else -np.inf)
        upper = np.full(n_base, eps0 if np.isfinite(eps0) else np.inf)
        lower[0], upper[0] = 0.0, mu_cap if mu_cap else np.inf
        return _assemble(c, A, b, A_eq, b_eq, n_extra, lower=lower, upper=upper)

    sol = lp.solve(build())
    if sol.status == "infeasible":
        return MetricResult(0.0, "nominal-infeasible", None, None, None,
                            note="no open-loop input keeps the nominal run inside the spec")
    note = None
    if sol.status == "unbounded":
        sol = lp.solve(build(mu_cap=UNBOUNDED_PROBE))
        note = (f"unbounded: no constrained row depends on the disturbance; "
                f"certificate evaluated at probe bound {UNBOUNDED_PROBE:g}")
    v = sol.x[1:1 + mN].reshape(system.N, system.m)
    controller = OpenLoopSequence(v)
    mu = _mu_supported(blocks, at_v=v.ravel())
    value = math.inf if note else mu
    cert = None
    if certify and system.n * system.N <= 24:
        cert = certify_vertices(system, controller, x0, min(mu, UNBOUNDED_PROBE), sets,
                                eps=eps0 if np.isfinite(eps0) else None)
    return MetricResult(value, "feasible", controller,
                        companion=float(np.abs(v).max()) if v.size else 0.0,
                        certificate=cert, note=note)


def _with_mu_col(F_v: np.ndarray, n_base: int) -> np.ndarray:
    """Embed the open-loop F_v into base-variable coordinates [mu, v]."""
    out = np.zeros((F_v.shape[0], n_base))
    out[:, 1:1 + F_v.shape[1]] = F_v
    return out


def effort_open(system: LTVSystem, sets: specs.TimedSets, x0, mu0: float,
                *, form: str = "l1", certify: bool = True) -> MetricResult:
    """Smallest input bound whose best open-loop sequence absorbs mu0.

    Solves  min eps  s.t.  mu0*||E_i||_1 <= F_i(x0, v),  ||v_k||_inf <= eps.
    """
    if mu0 < 0:
        raise ValueError("mu0 must be nonnegative")
    blocks = open_loop_blocks(system, sets, x0)
    mN = system.m * system.N
    n_base = 1 + mN

    def build(mu_val):
        F_lin = np.zeros((blocks.E.shape[0], n_base))
        F_lin[:, 1:] = blocks.F_v
        A, b, A_eq, b_eq, n_extra = _robust_rows(
            blocks.E, blocks.F_const, F_lin, n_base, None, mu_val, form)
        c = np.zeros(n_base)
        c[0] = 1.0
        box = _input_box_rows(n_base, 0, 1, mN)
        lower = np.full(n_base, -np.inf)
        lower[0] = 0.0
        return _assemble(c, A, b, A_eq, b_eq, n_extra, extra_ub=box,
                         lower=lower, upper=None, sense="min")

    sol = lp.solve(build(mu0))
    if sol.status == "infeasible":
        nominal = lp.solve(build(0.0))
        if nominal.status == "optimal":
            raise InfeasibleAtMuError(mu0)
        return MetricResult(0.0, "nominal-infeasible", None, None, None,
                            note="no open-loop input keeps the nominal run inside the spec")
    v = _polish_effort_open(blocks, mu0, sol.x[1:1 + mN]).reshape(system.N, system.m)
    eps = float(np.abs(v).max()) if v.size else 0.0
    controller = OpenLoopSequence(v)
    cert = None
    if certify and system.n * system.N <= 24:
        cert = certify_vertices(system, controller, x0, mu0, sets, eps=eps)
    return MetricResult(eps, "feasible", controller, companion=float(mu0),
                        certificate=cert)


def pareto_open(system: LTVSystem, sets: specs.TimedSets, x0, w1: float,
                w2: float, *, eps_cap: float | None = None,
                mu_fix: float | None = None, form: str = "l1") -> ParetoPoint:
    """Best trade-off  w1*mu - w2*eps  over open-loop sequences.

    ``eps_cap``/``mu_fix`` clamp one coordinate; the degenerate weight
    choices then reproduce the plain resilience/effort queries.
    """
    if w1 < 0 or w2 < 0:
        raise ValueError("weights must be nonnegative")
    if w2 == 0 and eps_cap is not None:
        res = resilience_open(system, sets, x0, eps0=eps_cap, form=form, certify=False)
        if res.status != "feasible":
            raise InfeasibleAtMuError(0.0)
        return ParetoPoint(w1, w2, res.value, res.companion,
                           w1 * res.value - w2 * res.companion, res.controller)
    if w1 == 0 and mu_fix is not None:
        eff = effort_open(system, sets, x0, mu_fix, form=form, certify=False)
        if eff.status != "feasible":
            raise InfeasibleAtMuError(mu_fix)
        return ParetoPoint(w1, w2, mu_fix, eff.value,
                           w1 * mu_fix - w2 * eff.value, eff.controller)

    blocks = open_loop_blocks(system, sets, x0)
    mN = system.m * system.N
    n_base = 2 + mN
    F_lin = np.zeros((blocks.E.shape[0], n_base))
    F_lin[:, 2:] = blocks.F_v
    A, b, A_eq, b_eq, n_extra = _robust_rows(
        blocks.E, blocks.F_const, F_lin, n_base, 0, 0.0, form)
    c = np.zeros(n_base)
    c[0], c[1] = w1, -w2
    box = _input_box_rows(n_base, 1, 2, mN)
    lower = np.full(n_base, -np.inf)
    upper = np.full(n_base, np.inf)
    lower[0] = mu_fix if mu_fix is not None else 0.0
    upper[0] = mu_fix if mu_fix is not None else np.inf
    lower[1] = 0.0
    upper[1] = eps_cap if eps_cap is not None else np.inf
    sol = lp.solve(_assemble(c, A, b, A_eq, b_eq, n_extra, extra_ub=box,
                             lower=lower, upper=upper))
    if sol.status == "infeasible":
        raise InfeasibleAtMuError(mu_fix if mu_fix is not None else 0.0)
    if sol.status == "unbounded":
        raise UnboundedObjectiveError(
            "trade-off unbounded: increasing mu is never limited by the spec "
            "(or w2=0 leaves eps uncontrolled); cap eps or fix mu")
    v = sol.x[2:2 + mN].reshape(system.N, system.m)
    eps = float(np.abs(v).max()) if v.size else 0.0
    mu = mu_fix if mu_fix is not None else _mu_supported(blocks, at_v=v.ravel())
    return ParetoPoint(w1, w2, float(mu), eps, w1 * float(mu) - w2 * eps,
                       OpenLoopSequence(v))


# ---------------------------------------------------------------------------
# closed-loop queries (outer search over alpha1, inner LPs)


def _inner_resilience(system, sets, x0, alpha1, eps0, form, mu_cap=None):
    blocks = closed_loop_blocks(system, sets, x0, alpha1)
    if not np.isfinite(eps0):
        blocks = blocks.state_rows()
    m = system.m
    n_base = 1 + m
    F_lin = np.zeros((blocks.E.shape[0], n_base))
    F_lin[:, 1:] = blocks.F_alpha2
    F_const = blocks.F_const + (blocks.F_eps * eps0 if np.isfinite(eps0) else 0.0)
    A, b, A_eq, b_eq, n_extra = _robust_rows(
        blocks.E, F_const, F_lin, n_base, 0, 0.0, form)
    c = np.zeros(n_base)
    c[0] = 1.0
    lower = np.full(n_base, -np.inf)
    lower[0] = 0.0
    upper = np.full(n_base, np.inf)
    if mu_cap is not None:
        upper[0] = mu_cap
    sol = lp.solve(_assemble(c, A, b, A_eq, b_eq, n_extra, lower=lower, upper=upper))
    if sol.status == "infeasible":
        return None
    if sol.status == "unbounded":
        raise _UnboundedInner()
    alpha2 = sol.x[1:1 + m]
    F = F_const + blocks.F_alpha2 @ alpha2
    return _mu_supported(blocks, F=F), alpha2


def _repair_rows(R: np.ndarray, s: np.ndarray, z: np.ndarray) -> np.ndarray | None:
    """Smallest (sup-norm) decision nudge dz giving every affine row slack
    s + R dz a strictly positive floor, or None when no small nudge does.

    LPs leave boundary rows negative by up to their feasibility tolerance;
    certificates need true slack.  A repair exists whenever the queried
    level is not capacity-forced, and then costs O(tolerance) in the
    decisions, so downstream values are unchanged for all purposes.
    """
    tau = 1e-9 * (1.0 + np.abs(s))
    if (s >= tau).all():
        return z
    p = R.shape[1]
    cap = 1e-4 * (1.0 + float(np.abs(z).max()) if z.size else 1.0)
    nv = 1 + p
    A_rows = np.zeros((R.shape[0] + 2 * p, nv))
    b_rows = np.zeros(A_rows.shape[0])
    A_rows[:R.shape[0], 1:] = -R
    b_rows[:R.shape[0]] = s - tau
    for j in range(p):
        A_rows[R.shape[0] + 2 * j, 1 + j] = 1.0
        A_rows[R.shape[0] + 2 * j + 1, 1 + j] = -1.0
        A_rows[R.shape[0] + 2 * j:R.shape[0] + 2 * j + 2, 0] = -1.0
    c = np.zeros(nv)
    c[0] = 1.0
    lower = np.full(nv, -np.inf)
    lower[0] = 0.0
    upper = np.full(nv, np.inf)
    upper[0] = cap
    try:
        sol = lp.solve(lp.LinearProgram(c=c, A_ub=A_rows, b_ub=b_rows,
                                        lower=lower, upper=upper, sense="min"))
    except Exception:
        return None
    if sol.status != "optimal":
        return None
    out = z + sol.x[1:]
    if (s + R @ sol.x[1:]).min() < 0.0:
        return None
    return out


def _polish_effort_closed(system, sets, x0, alpha1, mu0, form, eps_lp, a2_lp):
    """Clear negative dust on binding state rows at the queried mu0.

    First try a tiny repair nudge of alpha2 (value-preserving).  When the
    level is capacity-forced the repair is impossible; then fall back to
    the max-capacity alpha2 at this gain, whose cleaned support holds in
    floating point by construction.
    """
    blocks = closed_loop_blocks(system, sets, x0, alpha1)
    norms = l1_row_norms(blocks)
    s = blocks.n_state_rows
    inp = blocks.F_eps > 0.5

    def state_slack(a2):
        F = blocks.F_const[:s] + blocks.F_alpha2[:s] @ a2
        return F - mu0 * norms[:s]

    def input_eps(a2):
        need = mu0 * norms - blocks.F_const - blocks.F_alpha2 @ a2
        return float(max(0.0, need[inp].max())) if inp.any() else 0.0

    if s == 0 or state_slack(a2_lp).min() >= 0.0:
        return eps_lp, a2_lp
    fixed = _repair_rows(blocks.F_alpha2[:s], state_slack(a2_lp), a2_lp)
    if fixed is not None:
        return max(eps_lp, input_eps(fixed)), fixed
    anchor = _inner_resilience(system, sets, x0, alpha1, math.inf, form)
    if anchor is None or anchor[0] < mu0:
        return eps_lp, a2_lp
    a2_res = anchor[1]
    if state_slack(a2_res).min() >= 0.0:
        return max(eps_lp, input_eps(a2_res)), a2_res
    return eps_lp, a2_lp


def _polish_effort_open(blocks, mu0, v_lp):
    """Open-loop analogue: nudge the stacked input sequence until every
    robust row has true nonnegative slack at mu0."""
    norms = l1_row_norms(blocks)
    slack = blocks.F_const + blocks.F_v @ v_lp - mu0 * norms
    if slack.min() >= 0.0:
        return v_lp
    fixed = _repair_rows(blocks.F_v, slack, v_lp)
    return v_lp if fixed is None else fixed


def _inner_effort(system, sets, x0, alpha1, mu0, form):
    blocks = closed_loop_blocks(system, sets, x0, alpha1)
    m = system.m
    n_base = 1 + m
    F_lin = np.zeros((blocks.E.shape[0], n_base))
    F_lin[:, 0] = blocks.F_eps
    F_lin[:, 1:] = blocks.F_alpha2
    A, b, A_eq, b_eq, n_extra = _robust_rows(
        blocks.E, blocks.F_const, F_lin, n_base, None, mu0, form)
    c = np.zeros(n_base)
    c[0] = 1.0
    lower = np.full(n_base, -np.inf)
    lower[0] = 0.0
    sol = lp.solve(_assemble(c, A, b, A_eq, b_eq, n_extra, lower=lower,
                             upper=None, sense="min"))
    if sol.status != "optimal":
        return None
    alpha2 = sol.x[1:1 + m]
    norms = np.abs(blocks.E).sum(axis=1)
    need = mu0 * norms - blocks.F_const - blocks.F_alpha2 @ alpha2
    inp = blocks.F_eps > 0.5
    eps = float(max(0.0, need[inp].max())) if inp.any() else 0.0
    return eps, alpha2


def _inner_pareto(system, sets, x0, alpha1, w1, w2, eps_cap, mu_fix, form):
    blocks = closed_loop_blocks(system, sets, x0, alpha1)
    m = system.m
    n_base = 2 + m
    F_lin = np.zeros((blocks.E.shape[0], n_base))
    F_lin[:, 1] = blocks.F_eps
    F_lin[:, 2:] = blocks.F_alpha2
    A, b, A_eq, b_eq, n_extra = _robust_rows(
        blocks.E, blocks.F_const, F_lin, n_base, 0, 0.0, form)
    c = np.zeros(n_base)
    c[0], c[1] = w1, -w2
    lower = np.full(n_base, -np.inf)
    upper = np.full(n_base, np.inf)
    lower[0] = mu_fix if mu_fix is not None else 0.0
    upper[0] = mu_fix if mu_fix is not None else np.inf
    lower[1] = 0.0
    upper[1] = eps_cap if eps_cap is not None else np.inf
    sol = lp.solve(_assemble(c, A, b, A_eq, b_eq, n_extra, lower=lower, upper=upper))
    if sol.status == "infeasible":
        return None
    if sol.status == "unbounded":
        raise _UnboundedInner()
    mu, eps = float(sol.x[0]), float(sol.x[1])
    alpha2 = sol.x[2:2 + m]
    return (w1 * mu - w2 * eps), (mu, eps, alpha2)


def _outer_search(system, evaluate, search: SearchConfig | None):
    """Multi-start Nelder-Mead over the feedback gain entries.

    ``evaluate(alpha1) -> float or None`` returns the inner optimum to
    MAXIMIZE (callers negate for minimization).  Returns the best
    (value, alpha1, n_evals) or (None, None, n_evals) when every start was
    infeasible.
    """
    cfg = search or SearchConfig()
    m, n = system.m, system.n
    dim = m * n
    rng = np.random.default_rng(cfg.seed)
    evals = [0]
    bad = 1e12

    def penalized(theta):
        evals[0] += 1
        val = evaluate(theta.reshape(m, n))
        if val is None:
            return bad + 1e3 * float(np.abs(theta).sum())
        return -val

    seeds = [np.zeros(dim)]
    seeds += [np.asarray(a, dtype=float).ravel() for a in cfg.extra_starts]
    pool = rng.normal(0.0, cfg.scale, size=(cfg.presamples, dim))
    scored = sorted(range(len(pool)), key=lambda i: penalized(pool[i]))
    for i in scored[:max(0, cfg.restarts - len(seeds))]:
        seeds.append(pool[i])
    best_f, best_theta = math.inf, None
    for s in seeds:
        step = max(cfg.simplex_step, 1e-3)
        simplex = np.vstack([s] + [s + step * np.eye(dim)[i] for i in range(dim)])
        res = minimize(penalized, s, method="Nelder-Mead",
                       options={"maxiter": cfg.max_iter, "maxfev": 4 * cfg.max_iter,
                                "fatol": cfg.tol, "xatol": 1e-6,
                                "initial_simplex": simplex})
        if res.fun < best_f - 1e-15:
            best_f, best_theta = float(res.fun), res.x.copy()
    if best_theta is None or best_f >= bad:
        return None, None, evals[0]
    return -best_f, best_theta.reshape(m, n), evals[0]


_INCOMPLETE = ("search-based: every start failed, so nominal infeasibility "
               "is reported without a completeness guarantee")


def resilience_closed(system: LTVSystem, sets: specs.TimedSets, x0,
                      eps0: float = math.inf, search: SearchConfig | None = None,
                      *, form: str = "l1", certify: bool = True) -> MetricResult:
    """Largest disturbance bound under affine feedback u = alpha1 x + alpha2.

    The value is a certified lower bound on the true closed-loop resilience
    (the joint problem is nonconvex in alpha1; the inner LP is exact).
    """
    def evaluate(alpha1):
        out = _inner_resilience(system, sets, x0, alpha1, eps0, form)
        return None if out is None else out[0]

    try:
        _, alpha1, _ = _outer_search(system, evaluate, search)
    except _UnboundedInner:
        return _unbounded_closed(system, sets, x0, eps0, form, certify)
    if alpha1 is None:
        return MetricResult(0.0, "nominal-infeasible", None, None, None,
                            note=_INCOMPLETE)
    mu, alpha2 = _inner_resilience(system, sets, x0, alpha1, eps0, form)
    controller = LinearFeedback(alpha1, alpha2)
    cert = None
    companion = None
    if certify and system.n * system.N <= 24:
        cert = certify_vertices(system, controller, x0, mu, sets,
                                eps=eps0 if np.isfinite(eps0) else None)
        companion = cert.max_input_norm
    return MetricResult(float(mu), "feasible", controller, companion, cert)


def _unbounded_closed(system, sets, x0, eps0, form, certify):
    mu, alpha2 = _inner_resilience(system, sets, x0, np.zeros((system.m, system.n)),
                                   eps0, form, mu_cap=UNBOUNDED_PROBE)
    controller = LinearFeedback(np.zeros((system.m, system.n)), alpha2)
    cert = None
    if certify and system.n * system.N <= 24:
        cert = certify_vertices(system, controller, x0, UNBOUNDED_PROBE, sets,
                                eps=eps0 if np.isfinite(eps0) else None)
    return MetricResult(math.inf, "feasible", controller, None, cert,
                        note=(f"unbounded: no constrained row depends on the "
                              f"disturbance; certificate evaluated at probe bound "
                              f"{UNBOUNDED_PROBE:g}"))


def effort_closed(system: LTVSystem, sets: specs.TimedSets, x0, mu0: float,
                  search: SearchConfig | None = None, *, form: str = "l1",
                  certify: bool = True) -> MetricResult:
    """Smallest input bound under affine feedback that absorbs mu0.

    Upper bound on the true closed-loop effort (outer search is local).
    """
    if mu0 < 0:
        raise ValueError("mu0 must be nonnegative")

    def evaluate(alpha1):
        out = _inner_effort(system, sets, x0, alpha1, mu0, form)
        return None if out is None else -out[0]

    res = None
    _, alpha1, _ = _outer_search(system, evaluate, search)
    if alpha1 is None:
        # near the resilience level the feasible gain set shrinks to almost
        # a point; random starts miss it, so seed from the resilience search
        res = resilience_closed(system, sets, x0, search=search, form=form,
                                certify=False)
        if res.status != "feasible":
            return MetricResult(0.0, "nominal-infeasible", None, None, None,
                                note=_INCOMPLETE)
        if res.value < mu0:
            raise InfeasibleAtMuError(mu0)
        cfg = search or SearchConfig()
        seeded = replace(cfg, extra_starts=tuple(cfg.extra_starts)
                         + (res.controller.alpha1,))
        _, alpha1, _ = _outer_search(system, evaluate, seeded)
        if alpha1 is None:
            raise InfeasibleAtMuError(mu0)
    if mu0 > 0:
        # the search can settle on a gain whose true capacity undershoots
        # mu0 by LP-tolerance dust; swap in a gain that certifiably covers it
        try:
            cap = _inner_resilience(system, sets, x0, alpha1, math.inf, form)
        except _UnboundedInner:
            cap = (math.inf, None)
        if cap is None or cap[0] < mu0:
            if res is None:
                res = resilience_closed(system, sets, x0, search=search,
                                        form=form, certify=False)
            if res.status == "feasible" and res.value >= mu0:
                alpha1 = res.controller.alpha1
    eps, alpha2 = _inner_effort(system, sets, x0, alpha1, mu0, form)
    eps, alpha2 = _polish_effort_closed(system, sets, x0, alpha1, mu0, form,
                                        eps, alpha2)
    controller = LinearFeedback(alpha1, alpha2)
    cert = None
    if certify and system.n * system.N <= 24:
        cert = certify_vertices(system, controller, x0, mu0, sets, eps=eps)
    return MetricResult(float(eps), "feasible", controller, companion=float(mu0),
                        certificate=cert)


def pareto_closed(system: LTVSystem, sets: specs.TimedSets, x0, w1: float,
                  w2: float, search: SearchConfig | None = None, *,
                  eps_cap: float | None = None, mu_fix: float | None = None,
                  form: str = "l1") -> ParetoPoint:
    """Best trade-off w1*mu - w2*eps over affine feedback controllers."""
    if w1 < 0 or w2 < 0:
        raise ValueError("weights must be nonnegative")
    if w2 == 0 and eps_cap is not None:
        res = resilience_closed(system, sets, x0, eps0=eps_cap, search=search,
                                form=form, certify=False)
        if res.status != "feasible":
            raise InfeasibleAtMuError(0.0)
        comp = res.companion if res.companion is not None else 0.0
        return ParetoPoint(w1, w2, res.value, comp, w1 * res.value - w2 * comp,
                           res.controller)
    if w1 == 0 and mu_fix is not None:
        eff = effort_closed(system, sets, x0, mu_fix, search=search, form=form,
                            certify=False)
        if eff.status != "feasible":
            raise InfeasibleAtMuError(mu_fix)
        return ParetoPoint(w1, w2, mu_fix, eff.value,
                           w1 * mu_fix - w2 * eff.value, eff.controller)

    def evaluate(alpha1):
        out = _inner_pareto(system, sets, x0, alpha1, w1, w2, eps_cap, mu_fix, form)
        return None if out is None else out[0]

    try:
        _, alpha1, _ = _outer_search(system, evaluate, search)
    except _UnboundedInner:
        raise UnboundedObjectiveError(
            "trade-off unbounded: the spec never limits mu for some gain; "
            "cap eps or fix mu") from None
    if alpha1 is None:
        raise InfeasibleAtMuError(mu_fix if mu_fix is not None else 0.0)
    _, (mu, eps, alpha2) = _inner_pareto(system, sets, x0, alpha1, w1, w2,
                                         eps_cap, mu_fix, form)
    return ParetoPoint(w1, w2, float(mu), float(eps),
                       w1 * float(mu) - w2 * float(eps),
                       LinearFeedback(alpha1, alpha2))


def pareto_sweep(system: LTVSystem, sets: specs.TimedSets, x0, weights,
                 mode: str = "open", search: SearchConfig | None = None,
                 *, form: str = "l1") -> list[ParetoPoint]:
    """One Pareto point per weight pair, duplicates coalesced.

    Points come back in the order of ``weights``; pairs that land on an
    already-seen (mu, eps) vertex are dropped.
    """
    if mode not in ("open", "closed"):
        raise ValueError("mode must be 'open' or 'closed'")
    out: list[ParetoPoint] = []
    seen = set()
    for w1, w2 in weights:
        if mode == "open":
            pt = pareto_open(system, sets, x0, float(w1), float(w2), form=form)
        else:
            pt = pareto_closed(system, sets, x0, float(w1), float(w2),
                               search=search, form=form)
        key = (round(pt.mu, 9), round(pt.eps, 9))
        if key in seen:
            continue
        seen.add(key)
        out.append(pt)
    return out
