"""Dense two-phase simplex solver for the linear programs built here.

The solver is deliberately self-contained and deterministic: identical
inputs take identical pivot sequences and return bit-identical solutions.
It handles free variables by sign splitting, finite bounds by shifting,
and reports dual multipliers suitable for certificate checking.

Entering variables follow Dantzig's rule (most negative reduced cost,
lowest index on ties); after a run of degenerate pivots the solver drops
to Bland's rule, which cannot cycle.  The final basic solution and the
duals are recomputed from a fresh factorization of the basis so reported
numbers do not inherit tableau drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from resilopt.errors import DegeneratePivotError, DimensionMismatchError

PIVOT_TOL = 1e-9
FEAS_TOL = 1e-8
_STALL_LIMIT = 60
_REFACTOR_EVERY = 64


class _Breakdown(Exception):
    """Internal: accumulated roundoff invalidated the tableau; retry."""


@dataclass
class LinearProgram:
    """min/max  c . x  subject to  A_ub x <= b_ub,  A_eq x = b_eq,
    lower <= x <= upper (entries of the bounds may be infinite).

    Missing blocks may be None; missing bounds default to x >= 0.
    """

    c: np.ndarray
    A_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    sense: str = "min"

    def __post_init__(self):
        self.c = np.atleast_1d(np.asarray(self.c, dtype=float))
        d = self.c.shape[0]
        if self.A_ub is not None:
            self.A_ub = np.atleast_2d(np.asarray(self.A_ub, dtype=float))
            self.b_ub = np.atleast_1d(np.asarray(self.b_ub, dtype=float))
            if self.A_ub.shape != (self.b_ub.shape[0], d):
                raise DimensionMismatchError("inequality block has inconsistent shape")
        if self.A_eq is not None:
            self.A_eq = np.atleast_2d(np.asarray(self.A_eq, dtype=float))
            self.b_eq = np.atleast_1d(np.asarray(self.b_eq, dtype=float))
            if self.A_eq.shape != (self.b_eq.shape[0], d):
                raise DimensionMismatchError("equality block has inconsistent shape")
        self.lower = (np.zeros(d) if self.lower is None
                      else np.atleast_1d(np.asarray(self.lower, dtype=float)))
        self.upper = (np.full(d, np.inf) if self.upper is None
                      else np.atleast_1d(np.asarray(self.upper, dtype=float)))
        if self.lower.shape != (d,) or self.upper.shape != (d,):
            raise DimensionMismatchError("bounds have inconsistent shape")
        if self.sense not in ("min", "max"):
            raise DimensionMismatchError(f"sense must be 'min' or 'max', got '{self.sense}'")
        for name, block in (("c", self.c), ("b_ub", self.b_ub), ("b_eq", self.b_eq),
                            ("A_ub", self.A_ub), ("A_eq", self.A_eq)):
            if block is not None and not np.isfinite(block).all():
                raise DimensionMismatchError(f"{name} contains non-finite entries")
        if (self.lower > self.upper).any():
            raise DimensionMismatchError("some lower bound exceeds its upper bound")

    @property
    def n_vars(self) -> int:
        return self.c.shape[0]


@dataclass
class LPSolution:
    """Solver outcome.

    ``status`` is "optimal", "infeasible" or "unbounded".  ``dual_ub`` and
    ``dual_eq`` are row multipliers of the original inequality and equality
    blocks.  With g = c for a minimization and g = -c for a maximization,
    they satisfy stationarity  g + A_ub' dual_ub + A_eq' dual_eq = 0  on
    every coordinate strictly between its bounds, with dual_ub >= 0 and
    complementary to the inequality slacks.
    """

    status: str
    x: np.ndarray | None = None
    objective: float | None = None
    iterations: int = 0
    dual_ub: np.ndarray | None = None
    dual_eq: np.ndarray | None = None
    basis: list[int] = field(default_factory=list)


def dump(lp: LinearProgram) -> str:
    """Human-readable rendering of a program, for logging and bug reports."""
    lines = [f"{lp.sense} {np.array2string(lp.c, precision=6)}"]
    if lp.A_ub is not None:
        lines.append(f"subject to {lp.A_ub.shape[0]} inequality rows:")
        for row, rhs in zip(lp.A_ub, lp.b_ub):
            lines.append(f"  {np.array2string(row, precision=6)} . x <= {rhs:.6g}")
    if lp.A_eq is not None:
        lines.append(f"subject to {lp.A_eq.shape[0]} equality rows:")
        for row, rhs in zip(lp.A_eq, lp.b_eq):
            lines.append(f"  {np.array2string(row, precision=6)} . x == {rhs:.6g}")
    lines.append(f"bounds: lower={np.array2string(lp.lower, precision=6)} "
                 f"upper={np.array2string(lp.upper, precision=6)}")
    return "\n".join(lines)


class _Tableau:
    """Simplex state on the standard form min cost.z, M z = b, z >= 0.

    A pristine copy of the standard-form data is frozen once the column set
    is final; the tableau is rebuilt from it at phase boundaries and every
    ``_REFACTOR_EVERY`` pivots so roundoff cannot accumulate unchecked.
    """

    def __init__(self, M: np.ndarray, b: np.ndarray, n_struct: int,
                 pivot_tol: float = PIVOT_TOL):
        self.M = M
        self.b = b
        self.n_struct = n_struct          # structural + slack columns
        self.pivot_tol = pivot_tol
        self.rows, self.cols = M.shape
        self.basis = [-1] * self.rows
        self.row_ids = list(range(self.rows))   # original row of each tableau row
        self.iterations = 0
        self.M0: np.ndarray | None = None
        self.b0: np.ndarray | None = None

    def install_artificials(self, needs_artificial: np.ndarray) -> list[int]:
        art_cols = []
        blocks = [self.M]
        for i in range(self.rows):
            if needs_artificial[i]:
                col = np.zeros((self.rows, 1))
                col[i, 0] = 1.0
                blocks.append(col)
                art_cols.append(self.cols + len(art_cols))
                self.basis[i] = art_cols[-1]
        if art_cols:
            self.M = np.hstack(blocks)
            self.cols = self.M.shape[1]
        return art_cols

    def freeze(self) -> None:
        """Capture the unpivoted standard-form data for refactorization."""
        self.M0 = self.M.copy()
        self.b0 = self.b.copy()

    def refactor(self) -> None:
        """Rebuild M and b from the frozen data under the current basis."""
        if self.rows == 0:
            return
        live = self.row_ids
        Bmat = self.M0[np.ix_(live, self.basis)]
        rhs = np.column_stack([self.M0[live], self.b0[live]])
        try:
            fresh = np.linalg.solve(Bmat, rhs)
        except np.linalg.LinAlgError:
            raise _Breakdown("singular basis") from None
        if not np.isfinite(fresh).all():
            raise _Breakdown("non-finite refactorization")
        self.M = np.ascontiguousarray(fresh[:, :-1])
        self.b = fresh[:, -1].copy()
        scale = 1.0 + float(np.abs(self.b0[live]).max())
        if self.b.min() < -1e-6 * scale:
            raise _Breakdown("basis lost primal feasibility")
        np.maximum(self.b, 0.0, out=self.b)

    def run(self, cost: np.ndarray, banned: set[int], max_iter: int) -> str:
        """Minimize ``cost`` from the current basis; returns "optimal" or
        "unbounded".  Columns in ``banned`` never enter the basis.

        A verdict is only returned on a freshly refactorized tableau, so it
        reflects the true data rather than pivot-to-pivot drift.
        """
        basis = self.basis
        z = cost - cost[basis] @ self.M
        allowed = np.ones(self.cols, dtype=bool)
        for j in banned:
            allowed[j] = False
        stall = 0
        bland = False
        fresh = self.M0 is None     # nothing frozen: no refactorization pass
        since = 0
        rechecks = 0
        while True:
            if not fresh and since >= _REFACTOR_EVERY:
                self.refactor()
                z = cost - cost[basis] @ self.M
                fresh, since = True, 0
            M, b = self.M, self.b
            candidates = np.where(allowed & (z < -PIVOT_TOL))[0]
            if candidates.size == 0:
                if fresh or rechecks >= 4:
                    return "optimal"
                self.refactor()
                z = cost - cost[basis] @ self.M
                fresh, since = True, 0
                rechecks += 1
                continue
            if bland:
                enter = int(candidates[0])
            else:
                enter = int(candidates[np.argmin(z[candidates])])
            col = M[:, enter]
            pos = np.where(col > self.pivot_tol)[0]
            if pos.size == 0:
                if fresh or rechecks >= 4:
                    return "unbounded"
                self.refactor()
                z = cost - cost[basis] @ self.M
                fresh, since = True, 0
                rechecks += 1
                continue
            self.iterations += 1
            if self.iterations > max_iter:
                raise DegeneratePivotError(f"simplex exceeded {max_iter} iterations")
            ratios = b[pos] / col[pos]
            best = ratios.min()
            if bland:
                # pure Bland step: smallest leaving variable among exact ties
                tied = pos[ratios <= best + 1e-12]
                leave = int(tied[np.argmin([basis[i] for i in tied])])
            else:
                # two-pass ratio test: tolerate a tiny bound shift to reach
                # rows with solid pivots, otherwise near-parallel rows force
                # 1/piv amplification of roundoff
                relaxed = ((b[pos] + 1e-9 * (1.0 + np.abs(b[pos]))) / col[pos]).min()
                tied = pos[ratios <= relaxed]
                mags = col[tied]
                top = tied[mags >= 0.5 * mags.max()]
                leave = int(top[np.argmin([basis[i] for i in top])])
            piv = col[leave]
            if abs(b[leave] * z[enter] / piv) < 1e-12:
                stall += 1
                if stall >= _STALL_LIMIT:
                    bland = True
            else:
                stall = 0
            M[leave, :] /= piv
            b[leave] /= piv
            factor = M[:, enter].copy()
            factor[leave] = 0.0
            M -= np.outer(factor, M[leave, :])
            b -= factor * b[leave]
            np.maximum(b, 0.0, out=b)
            z -= z[enter] * M[leave, :]
            basis[leave] = enter
            fresh = False
            since += 1

    def evict_artificials(self, art_cols: list[int]) -> None:
        """Pivot basic artificials out of the basis; rows that cannot host a
        structural pivot are redundant and get dropped."""
        art = set(art_cols)
        drop = []
        for i in range(self.rows):
            if self.basis[i] not in art:
                continue
            row = self.M[i, :self.n_struct]
            if np.abs(row).max() <= self.pivot_tol:
                drop.append(i)
                continue
            enter = int(np.argmax(np.abs(row)))
            piv = self.M[i, enter]
            self.M[i, :] /= piv
            self.b[i] /= piv
            factor = self.M[:, enter].copy()
            factor[i] = 0.0
            self.M -= np.outer(factor, self.M[i, :])
            self.b -= factor * self.b[i]
            self.basis[i] = enter
        if drop:
            gone = set(drop)
            keep = [i for i in range(self.rows) if i not in gone]
            self.M = self.M[keep, :]
            self.b = self.b[keep]
            self.basis = [self.basis[i] for i in keep]
            self.row_ids = [self.row_ids[i] for i in keep]
            self.rows = len(keep)
        if self.rows:
            self.refactor()


def solve(lp: LinearProgram, max_iter: int | None = None) -> LPSolution:
    """Solve a linear program.

    Infeasibility and unboundedness are reported through ``status``; only
    malformed input or a pivot stall beyond the anti-cycling budget raises.
    A run whose final answer fails verification against the original data
    is retried once with a coarser pivot acceptance threshold before the
    solver gives up.
    """
    try:
        return _solve_once(lp, max_iter, PIVOT_TOL)
    except _Breakdown:
        pass
    try:
        return _solve_once(lp, max_iter, 1e-7)
    except _Breakdown as exc:
        raise DegeneratePivotError(
            f"numerical breakdown persisted across pivot tolerances: {exc}") from None


def _verify(lp: LinearProgram, x: np.ndarray) -> float:
    """Worst normalized violation of the original constraints at x."""
    worst = 0.0
    if lp.A_ub is not None:
        r = (lp.A_ub @ x - lp.b_ub) / (1.0 + np.abs(lp.b_ub))
        if r.size:
            worst = max(worst, float(r.max()))
    if lp.A_eq is not None:
        r = np.abs(lp.A_eq @ x - lp.b_eq) / (1.0 + np.abs(lp.b_eq))
        if r.size:
            worst = max(worst, float(r.max()))
    lo_ok = np.isfinite(lp.lower)
    hi_ok = np.isfinite(lp.upper)
    if lo_ok.any():
        lo = lp.lower[lo_ok]
        worst = max(worst, float(((lo - x[lo_ok]) / (1.0 + np.abs(lo))).max()))
    if hi_ok.any():
        hi = lp.upper[hi_ok]
        worst = max(worst, float(((x[hi_ok] - hi) / (1.0 + np.abs(hi))).max()))
    return worst


def _solve_once(lp: LinearProgram, max_iter: int | None, pivot_tol: float) -> LPSolution:
    d = lp.n_vars
    c0 = lp.c.copy() if lp.sense == "min" else -lp.c

    # -- substitute variables so every remaining variable is >= 0 ------------
    col_of: list[tuple] = []     # per variable: ("plus", col) or ("split", c+, c-)
    offsets = np.zeros(d)
    negated = np.zeros(d, dtype=bool)
    two_sided = []               # (variable, width) rows added for finite ranges
    n_cols = 0
    for j in range(d):
        lo, hi = lp.lower[j], lp.upper[j]
        if np.isfinite(lo):
            offsets[j] = lo
            col_of.append(("plus", n_cols))
            n_cols += 1
            if np.isfinite(hi):
                two_sided.append((j, hi - lo))
        elif np.isfinite(hi):
            offsets[j] = hi
            negated[j] = True
            col_of.append(("plus", n_cols))
            n_cols += 1
        else:
            col_of.append(("split", n_cols, n_cols + 1))
            n_cols += 2

    def expand(mat: np.ndarray) -> np.ndarray:
        out = np.zeros((mat.shape[0], n_cols))
        for j, spec in enumerate(col_of):
            colv = mat[:, j]
            if spec[0] == "plus":
                out[:, spec[1]] = -colv if negated[j] else colv
            else:
                out[:, spec[1]] = colv
                out[:, spec[2]] = -colv
        return out

    A_ub = lp.A_ub if lp.A_ub is not None else np.zeros((0, d))
    b_ub = lp.b_ub if lp.b_ub is not None else np.zeros(0)
    A_eq = lp.A_eq if lp.A_eq is not None else np.zeros((0, d))
    b_eq = lp.b_eq if lp.b_eq is not None else np.zeros(0)
    n_ub, n_eq = A_ub.shape[0], A_eq.shape[0]

    bound_A = np.zeros((len(two_sided), d))
    bound_b = np.zeros(len(two_sided))
    for r, (j, width) in enumerate(two_sided):
        bound_A[r, j] = 1.0
        bound_b[r] = width           # already in shifted coordinates
    G_ub = expand(A_ub)
    G_bounds = expand(bound_A) if two_sided else np.zeros((0, n_cols))
    G_eq = expand(A_eq)
    rhs_ub = b_ub - A_ub @ offsets
    rhs_eq = b_eq - A_eq @ offsets

    total_ub = n_ub + len(two_sided)
    rows = total_ub + n_eq
    n_struct = n_cols + total_ub
    M = np.zeros((rows, n_struct))
    M[:n_ub, :n_cols] = G_ub
    M[n_ub:total_ub, :n_cols] = G_bounds
    M[total_ub:, :n_cols] = G_eq
    for i in range(total_ub):
        M[i, n_cols + i] = 1.0
    b = np.concatenate([rhs_ub, bound_b, rhs_eq])

    row_sign = np.ones(rows)
    neg = b < 0
    M[neg, :] *= -1.0
    b[neg] *= -1.0
    row_sign[neg] = -1.0
    M_clean = M.copy()
    b_clean = b.copy()

    tab = _Tableau(M, b, n_struct=n_struct, pivot_tol=pivot_tol)
    needs_artificial = np.ones(rows, dtype=bool)
    for i in range(total_ub):
        if row_sign[i] > 0:      # slack column still has +1, usable as basis
            tab.basis[i] = n_cols + i
            needs_artificial[i] = False
    art_cols = tab.install_artificials(needs_artificial)
    tab.freeze()

    if max_iter is None:
        max_iter = 5000 + 80 * (rows + n_struct)

    iterations = 0
    if art_cols:
        phase1 = np.zeros(tab.cols)
        for j in art_cols:
            phase1[j] = 1.0
        status = tab.run(phase1, banned=set(), max_iter=max_iter)
        iterations += tab.iterations
        resid = float(phase1[tab.basis] @ tab.b)
        if status != "optimal" or resid > FEAS_TOL:
            return LPSolution(status="infeasible", iterations=iterations)
        tab.evict_artificials(art_cols)

    cost = np.zeros(tab.cols)
    cost_struct = expand(c0[None, :])[0]
    cost[:n_cols] = cost_struct
    tab.iterations = 0
    status = tab.run(cost, banned=set(art_cols), max_iter=max_iter)
    iterations += tab.iterations
    if status == "unbounded":
        return LPSolution(status="unbounded", iterations=iterations)

    # -- recover solution and duals from a fresh basis factorization ---------
    basis = list(tab.basis)
    if any(j >= n_struct for j in basis):
        raise _Breakdown("artificial variable stuck in the final basis")
    live = tab.row_ids
    Bmat = M_clean[np.ix_(live, basis)]
    cB = cost[basis]
    try:
        xB = np.linalg.solve(Bmat, b_clean[live])
        yB = np.linalg.solve(Bmat.T, cB)
    except np.linalg.LinAlgError:
        raise _Breakdown("singular final basis") from None
    x_std = np.zeros(n_struct)
    x_std[basis] = xB
    np.maximum(x_std, 0.0, out=x_std)

    x = np.empty(d)
    for j, spec in enumerate(col_of):
        if spec[0] == "plus":
            x[j] = offsets[j] + (-x_std[spec[1]] if negated[j] else x_std[spec[1]])
        else:
            x[j] = x_std[spec[1]] - x_std[spec[2]]
    objective = float(lp.c @ x)
    if _verify(lp, x) > 1e-6:
        raise _Breakdown("final point violates the original constraints")

    y = np.zeros(rows)
    y[live] = yB
    y *= row_sign
    lam = -y[:n_ub]
    nu = -y[total_ub:]
    np.maximum(lam, 0.0, out=lam)
    return LPSolution(status="optimal", x=x, objective=objective,
                      iterations=iterations, dual_ub=lam, dual_eq=nu,
                      basis=basis)
