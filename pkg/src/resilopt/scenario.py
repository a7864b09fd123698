"""Sampling-based resilience/effort estimation with a-posteriori risk bounds.

When the dynamics or the controller template leave the linear/polytopic
setting, the robust program over all disturbances is replaced by a sampled
one: draw M normalized disturbance sequences, require the loop to meet the
spec (and the input bound) under every sample scaled by mu, and optimize
the same  w1*mu - w2*eps  trade-off.  The number of support scenarios then
converts, through :func:`risk_bound`, into a distribution-free bound on the
probability that a fresh disturbance defeats the tuned design.

The sampled program is nonconvex; it is attacked with an exact penalty on
the scenario margins and multi-start Nelder-Mead, followed by a
deterministic polish (tighten eps to the realized inputs, push mu up by
bisection).  Every random stream is a counter-based generator keyed by the
master seed and the scenario index, so results are reproducible bit for
bit and independent of evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln, logsumexp

from resilopt import specs
from resilopt.errors import DimensionMismatchError, NoFeasiblePointError
from resilopt.model import (
    LinearFeedback,
    OpenLoopSequence,
    PolynomialFeedback,
    basis_size,
    monomial_basis,
    rollout_batch,
)

_BIG = 1e30                 # stand-in for a margin ruined by non-finite states
_START_STREAM = 2**64 - 1   # Philox key word reserved for optimizer starts


# ---------------------------------------------------------------------------
# disturbance samples


@dataclass(frozen=True)
class ScenarioSet:
    """M normalized disturbance sequences, each component in [-1, 1]."""

    samples: np.ndarray          # (M, N, n)
    seed: int
    distribution: str = "uniform"

    @property
    def M(self) -> int:
        return self.samples.shape[0]

    def without(self, i: int) -> "ScenarioSet":
        """Copy with sample ``i`` removed (used by the support count)."""
        keep = np.delete(self.samples, i, axis=0)
        return ScenarioSet(keep, self.seed, self.distribution)


def sample_disturbances(M: int, N: int, n: int, seed: int = 0,
                        distribution: str = "uniform") -> ScenarioSet:
    """Draw M i.i.d. normalized disturbance sequences of shape (N, n).

    ``distribution`` is "uniform" (independent uniform on [-1, 1] per
    component) or "zero" (the degenerate nominal-only set).  Sample i is
    drawn from its own counter-based stream keyed by (seed, i), so the set
    is reproducible regardless of how the loop is scheduled.
    """
    if M < 1:
        raise ValueError(f"need at least one scenario, got M={M}")
    if N < 1 or n < 1:
        raise DimensionMismatchError(f"bad sequence shape ({N}, {n})")
    if distribution == "zero":
        samples = np.zeros((M, N, n))
    elif distribution == "uniform":
        samples = np.empty((M, N, n))
        base = np.uint64(seed & (2**64 - 1))
        for i in range(M):
            key = np.array([base, np.uint64(i)], dtype=np.uint64)
            rng = np.random.Generator(np.random.Philox(key=key))
            samples[i] = rng.uniform(-1.0, 1.0, size=(N, n))
    else:
        raise ValueError(f"unknown distribution '{distribution}'")
    return ScenarioSet(samples, int(seed), distribution)


# ---------------------------------------------------------------------------
# controller templates


@dataclass(frozen=True)
class ControllerTemplate:
    """Parametric controller family the scenario program searches over.

    kind "linear":      u = alpha1 @ x + alpha2             (m*n + m params)
    kind "polynomial":  u = C @ monomials(x) up to degree   (m*D params)
    kind "open-loop":   u(k) = v_k, fixed sequence          (N*m params)
    """

    kind: str
    n: int
    m: int
    N: int = 0
    degree: int = 1

    def __post_init__(self):
        if self.kind not in ("linear", "polynomial", "open-loop"):
            raise ValueError(f"unknown template kind '{self.kind}'")
        if self.kind == "open-loop" and self.N < 1:
            raise DimensionMismatchError("open-loop template needs the horizon")

    @property
    def n_params(self) -> int:
        if self.kind == "linear":
            return self.m * self.n + self.m
        if self.kind == "polynomial":
            return self.m * basis_size(self.n, self.degree)
        return self.N * self.m

    def build(self, theta: np.ndarray):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise DimensionMismatchError(
                f"template expects {self.n_params} parameters, got {theta.shape}")
        if self.kind == "linear":
            cut = self.m * self.n
            return LinearFeedback(theta[:cut].reshape(self.m, self.n), theta[cut:])
        if self.kind == "polynomial":
            D = basis_size(self.n, self.degree)
            return PolynomialFeedback(self.degree, theta.reshape(self.m, D))
        return OpenLoopSequence(theta.reshape(self.N, self.m))

    def anchor(self, theta: np.ndarray, x0: np.ndarray,
               u0: np.ndarray) -> np.ndarray:
        """Adjust the constant coefficients so the controller emits ``u0`` at
        ``x0``.  Random parameter draws compose feedback terms whose outputs
        explode at the operating point; anchoring keeps every start on the
        manifold of sane first inputs without constraining the feedback
        structure."""
        theta = np.asarray(theta, dtype=float).copy()
        u0 = np.asarray(u0, dtype=float)
        if self.kind == "linear":
            cut = self.m * self.n
            theta[cut:] = u0 - theta[:cut].reshape(self.m, self.n) @ x0
        elif self.kind == "polynomial":
            D = basis_size(self.n, self.degree)
            coeffs = theta.reshape(self.m, D)
            coeffs[:, 0] += u0 - coeffs @ monomial_basis(x0, self.degree)
            theta = coeffs.ravel()
        else:
            theta[:self.m] = u0
        return theta

    def describe(self) -> dict:
        out = {"kind": self.kind, "state_dim": self.n, "input_dim": self.m,
               "n_params": self.n_params}
        if self.kind == "polynomial":
            out["degree"] = self.degree
        if self.kind == "open-loop":
            out["horizon"] = self.N
        return out


def linear_template(n: int, m: int) -> ControllerTemplate:
    return ControllerTemplate("linear", n, m)


def polynomial_template(n: int, m: int, degree: int) -> ControllerTemplate:
    return ControllerTemplate("polynomial", n, m, degree=degree)


def open_loop_template(N: int, n: int, m: int) -> ControllerTemplate:
    return ControllerTemplate("open-loop", n, m, N=N)


# ---------------------------------------------------------------------------
# objective / options / certificate


@dataclass(frozen=True)
class ScenarioObjective:
    """Trade-off  w1*mu - w2*eps  with optionally one coordinate pinned.

    ``mu0`` pins the disturbance level (effort-style query); ``eps0`` pins
    the input bound (resilience-style query).  At most one may be set.
    With ``eps0`` unset and w2 == 0 the inputs are unconstrained and eps is
    reported as the largest input the tuned loop actually used.
    """

    w1: float = 1.0
    w2: float = 0.0
    mu0: float | None = None
    eps0: float | None = None

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("weights must be nonnegative")
        if self.mu0 is not None and self.eps0 is not None:
            raise ValueError("fix at most one of mu0 and eps0")
        if self.mu0 is not None and self.mu0 < 0:
            raise ValueError("mu0 must be nonnegative")
        if self.eps0 is not None and self.eps0 < 0:
            raise ValueError("eps0 must be nonnegative")

    @property
    def mu_free(self) -> bool:
        return self.mu0 is None

    @property
    def eps_free(self) -> bool:
        return self.eps0 is None and self.w2 > 0


@dataclass(frozen=True)
class SolveOptions:
    restarts: int = 8
    presamples: int = 64
    lifted_starts: int = 4       # starts built by open-loop centering + fit
    scale: float = 1.0           # controller-parameter start scale
    mu_scale: float = 0.1
    eps_scale: float = 1.0
    max_iter: int = 500          # Nelder-Mead iterations per penalty round
    tol: float = 1e-6
    seed: int = 0
    rho0: float = 1e3
    rho_growth: float = 10.0
    rho_cap: float = 1e9
    mu_cap: float = 1e6
    margin_slack: float = 1e-8
    refine: bool = True          # profile climb on the controller block
    extra_starts: tuple = ()


@dataclass(frozen=True)
class ScenarioCertificate:
    """Tuned decision plus the a-posteriori generalization bound.

    ``s_M``/``beta``/``bound`` stay None until the support-counting pass has
    run; ``violation_rate`` is the Monte-Carlo estimate on a fresh sample
    set when one was supplied.  ``cap_hit`` flags a mu that stopped at the
    configured ceiling rather than at a binding scenario.
    """

    mu: float
    eps: float | None
    alpha: np.ndarray
    objective: float
    M: int
    seed: int
    template: dict = field(default_factory=dict)
    worst_margin: float = math.nan
    cap_hit: bool = False
    s_M: int | None = None
    beta: float | None = None
    bound: float | None = None
    violation_rate: float | None = None

    def __post_init__(self):
        if self.s_M is not None and not 0 <= self.s_M <= self.M:
            raise ValueError(f"support count {self.s_M} outside 0..{self.M}")
        if self.bound is not None and not 0.0 <= self.bound <= 1.0:
            raise ValueError(f"risk bound {self.bound} outside [0, 1]")

    def decision(self) -> np.ndarray:
        """Full decision vector (mu, eps, alpha...) for displacement tests."""
        eps = 0.0 if self.eps is None else self.eps
        return np.concatenate([[self.mu, eps], np.asarray(self.alpha, float)])

    def to_dict(self) -> dict:
        return {
            "mu": self.mu,
            "eps": self.eps,
            "alpha": np.asarray(self.alpha, float).tolist(),
            "objective": self.objective,
            "M": self.M,
            "seed": self.seed,
            "template": dict(self.template),
            "worst_margin": self.worst_margin,
            "cap_hit": self.cap_hit,
            "s_M": self.s_M,
            "beta": self.beta,
            "bound": self.bound,
            "violation_rate": self.violation_rate,
        }


# ---------------------------------------------------------------------------
# the sampled program


class _Program:
    """Margins and penalized objective of the sampled trade-off program."""

    def __init__(self, system, sets, x0, template, scenarios, objective, options):
        if template.n != system.n or template.m != system.m:
            raise DimensionMismatchError(
                f"template is {template.n}x{template.m}, the system is "
                f"{system.n}x{system.m}")
        if scenarios.samples.shape[1:] != (system.N, system.n):
            raise DimensionMismatchError(
                f"scenario samples have shape {scenarios.samples.shape[1:]}, "
                f"the system needs ({system.N}, {system.n})")
        self.system = system
        self.sets = sets
        self.x0 = np.asarray(x0, dtype=float)
        self.template = template
        self.delta = scenarios.samples
        self.obj = objective
        self.opt = options
        self.mu_free = objective.mu_free
        self.eps_free = objective.eps_free
        self.n_theta = int(self.mu_free) + int(self.eps_free) + template.n_params
        # input bound applies unless eps is neither pinned nor optimized
        self.input_bounded = objective.eps0 is not None or self.eps_free
        self.evaluations = 0

    def unpack(self, theta: np.ndarray) -> tuple[float, float | None, np.ndarray]:
        j = 0
        if self.mu_free:
            mu = min(max(float(theta[0]), 0.0), self.opt.mu_cap)
            j = 1
        else:
            mu = float(self.obj.mu0)
        if self.eps_free:
            eps = max(float(theta[j]), 0.0)
            j += 1
        elif self.obj.eps0 is not None:
            eps = float(self.obj.eps0)
        else:
            eps = None
        return mu, eps, theta[j:]

    def raw(self, mu: float, alpha: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Spec margins and input peaks per scenario, before the eps test."""
        controller = self.template.build(alpha)
        states, inputs = rollout_batch(self.system, controller, self.x0,
                                       mu * self.delta)
        m = specs.margin_batch(states, self.sets)
        with np.errstate(invalid="ignore"):
            peak = np.abs(inputs).max(axis=(1, 2)) if inputs.size else \
                np.zeros(m.shape)
        self.evaluations += 1
        return (np.where(np.isfinite(m), m, -_BIG),
                np.where(np.isfinite(peak), peak, _BIG))

    def margins(self, mu: float, eps: float | None, alpha: np.ndarray) -> np.ndarray:
        m, peak = self.raw(mu, alpha)
        if self.input_bounded:
            m = np.minimum(m, eps - peak)
        return m

    def margins_at(self, theta: np.ndarray) -> np.ndarray:
        return self.margins(*self.unpack(theta))

    def objective_value(self, mu: float, eps: float | None) -> float:
        return self.obj.w1 * mu - self.obj.w2 * (eps or 0.0)

    def penalized(self, theta: np.ndarray, rho: float) -> float:
        mu, eps, alpha = self.unpack(theta)
        shortfall = np.maximum(0.0, -self.margins(mu, eps, alpha)).sum()
        return -self.objective_value(mu, eps) + rho * float(shortfall)

    # -- deterministic refinement stages --------------------------------------

    def center(self, theta: np.ndarray, scales: np.ndarray,
               max_iter: int) -> np.ndarray:
        """Re-aim the controller block at the largest worst-case margin.

        Holding (mu, eps) fixed, maximize the smallest scenario margin over
        the controller parameters.  A controller with slack survives the mu
        raise that follows; the penalty ladder alone stops at the first
        barely-feasible point and leaves nothing to trade.
        """
        mu, eps, alpha = self.unpack(theta)
        k = self.n_theta - self.template.n_params

        def neg_worst(a: np.ndarray) -> float:
            return -float(self.margins(mu, eps, a).min())

        simplex = np.vstack([alpha] * (alpha.size + 1))
        for j in range(alpha.size):
            simplex[j + 1, j] += 0.25 * scales[k + j]
        res = minimize(neg_worst, alpha, method="Nelder-Mead",
                       options={"initial_simplex": simplex,
                                "maxiter": max_iter,
                                "fatol": self.opt.tol, "xatol": self.opt.tol})
        if -res.fun > float(self.margins(mu, eps, alpha).min()):
            theta = theta.copy()
            theta[k:] = res.x
        return theta

    def polish(self, theta: np.ndarray) -> np.ndarray:
        theta = theta.copy()
        mu, eps, alpha = self.unpack(theta)
        if self.eps_free:
            # the input bound never pays to be slack: drop eps onto the
            # largest input the loop actually produced
            _, inputs = rollout_batch(self.system, self.template.build(alpha),
                                      self.x0, mu * self.delta)
            realized = float(np.abs(inputs).max()) if inputs.size else 0.0
            if np.isfinite(realized) and realized < eps:
                eps = realized
                theta[1 if self.mu_free else 0] = eps
        if self.mu_free and self.obj.w1 > 0:
            theta[0] = self._raise_mu(mu, eps, alpha)
        return theta

    def refine(self, theta: np.ndarray, scales: np.ndarray,
               max_iter: int) -> np.ndarray:
        """Climb the value profile of the controller block directly.

        The penalty stage stalls wherever the margins hit zero, because a
        gain change only pays off through the mu (or eps) it unlocks, which
        the penalized objective cannot see.  Here the controller block is
        optimized against that unlocked value itself: for a free mu the
        profile is the largest bisection-feasible mu, for a pinned mu with
        free eps it is the input peak the spec-feasible loop needs.  Falls
        back to the incumbent whenever it scores at least as well.
        """
        mu, eps, alpha = self.unpack(theta)
        k = self.n_theta - self.template.n_params
        if self.mu_free and self.obj.w1 > 0 and not self.eps_free:

            def J(a: np.ndarray) -> float:
                worst = float(self.margins(0.0, eps, a).min())
                if worst < 0.0:
                    return 1.0 + -worst          # infeasible: chase feasibility
                return -self.obj.w1 * self._raise_mu(0.0, eps, a, iters=16)
        elif not self.mu_free and self.eps_free and self.obj.w2 > 0:

            def J(a: np.ndarray) -> float:
                m, peak = self.raw(mu, a)
                worst = float(m.min())
                if worst < 0.0:
                    return _BIG + -worst
                return self.obj.w2 * float(peak.max())
        else:
            return theta

        # the profile bends sharply along the feasible manifold; one simplex
        # scale either overshoots the turns or stalls short, so re-run the
        # search from the incumbent with shrinking steps
        cur, cur_J = alpha, J(alpha)
        for frac in (0.25, 0.05, 0.01):
            simplex = np.vstack([cur] * (cur.size + 1))
            for j in range(cur.size):
                simplex[j + 1, j] += frac * scales[k + j]
            res = minimize(J, cur, method="Nelder-Mead",
                           options={"initial_simplex": simplex,
                                    "maxiter": max_iter,
                                    "fatol": self.opt.tol,
                                    "xatol": self.opt.tol})
            if res.fun < cur_J:
                cur, cur_J = res.x, float(res.fun)
        if cur is not alpha:
            theta = theta.copy()
            theta[k:] = cur
        return self.polish(theta)

    def _raise_mu(self, mu: float, eps: float | None, alpha: np.ndarray,
                  iters: int = 60) -> float:
        def ok(level: float) -> bool:
            return float(self.margins(level, eps, alpha).min()) >= 0.0

        if not ok(mu):
            return mu
        step = max(self.opt.mu_scale, 0.5 * mu, 10 * self.opt.tol)
        hi = mu + step
        while hi < self.opt.mu_cap and ok(hi):
            mu, hi = hi, hi + 2.0 * (hi - mu)
        if hi >= self.opt.mu_cap:
            if ok(self.opt.mu_cap):
                return self.opt.mu_cap
            hi = self.opt.mu_cap
        for _ in range(iters):
            mid = 0.5 * (mu + hi)
            if ok(mid):
                mu = mid
            else:
                hi = mid
            if hi - mu <= 1e-12 * (1.0 + hi):
                break
        return mu


def _nominal_score(prog: _Program, controller) -> tuple[float, np.ndarray, np.ndarray]:
    """Margin of the single undisturbed rollout (plus states and inputs)."""
    d0 = np.zeros((1, prog.system.N, prog.system.n))
    states, inputs = rollout_batch(prog.system, controller, prog.x0, d0)
    m = float(specs.margin_batch(states, prog.sets)[0])
    if not math.isfinite(m):
        m = -_BIG
    return m, states[0], inputs[0]


def _lifted_starts(prog: _Program, options: SolveOptions,
                   rng: np.random.Generator, count: int) -> list[np.ndarray]:
    """Template starts built through the nominal trajectory.

    The set of template parameters whose nominal run satisfies the spec is
    typically a thin curved manifold that random draws miss.  The nominal
    input sequence, in contrast, lives in a small well-scaled space: center
    it against the spec first, regress the template onto the resulting
    trajectory, then re-center the template parameters on the nominal
    margin to absorb the regression error.  Every stage costs one rollout
    per evaluation.
    """
    tpl = prog.template
    N, m, n = prog.system.N, prog.system.m, prog.system.n
    u_scale = prog.obj.eps0 if prog.obj.eps0 is not None else options.scale
    eps_bound = prog.obj.eps0

    def bounded(controller) -> float:
        # same margin the sampled program scores: spec and, when the input
        # bound is pinned, the input slack share one min
        score, _, inputs = _nominal_score(prog, controller)
        if eps_bound is not None and inputs.size:
            score = min(score, eps_bound - float(np.abs(inputs).max()))
        return score

    def neg_open_margin(w: np.ndarray) -> float:
        return -bounded(OpenLoopSequence(w.reshape(N, m)))

    candidates = []
    for _ in range(max(2 * count, 4)):
        w0 = rng.uniform(-u_scale, u_scale, N * m)
        res = minimize(neg_open_margin, w0, method="Nelder-Mead",
                       options={"maxiter": 150 * N * m,
                                "fatol": options.tol, "xatol": options.tol})
        candidates.append((float(res.fun), res.x))
    candidates.sort(key=lambda c: c[0])

    if tpl.kind == "open-loop":
        alphas = [w.copy() for _, w in candidates[:count]]
    else:

        def neg_templ_margin(a: np.ndarray) -> float:
            return -bounded(tpl.build(a))

        def quality(a: np.ndarray) -> float:
            # rank by what the parameters can actually unlock, not by how
            # centered the nominal run is: disturbance capacity for the
            # resilience-type objective, margin otherwise
            worst = bounded(tpl.build(a))
            if worst < 0.0:
                return worst
            if prog.mu_free and prog.obj.w1 > 0 and not prog.eps_free:
                return 1.0 + prog._raise_mu(0.0, prog.obj.eps0, a, iters=12)
            return 1.0 + worst

        scored = []
        for _, w in candidates[:count]:
            _, states, _ = _nominal_score(prog,
                                          OpenLoopSequence(w.reshape(N, m)))
            if tpl.kind == "linear":
                design = np.hstack([states[:N], np.ones((N, 1))])
            else:
                design = monomial_basis(states[:N], tpl.degree)
            # the trajectory points are few and nearly collinear, so the
            # plain fit can explode the gains and destabilize the loop;
            # walk a ridge path and keep the best closed-loop margin
            targets = w.reshape(N, m)
            gram = design.T @ design
            ridge = np.eye(design.shape[1]) * (np.trace(gram)
                                               / design.shape[1])
            alpha, best = None, -np.inf
            for lam in (0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2):
                if lam == 0.0:
                    coef, *_ = np.linalg.lstsq(design, targets, rcond=None)
                else:
                    coef = np.linalg.solve(gram + lam * ridge,
                                           design.T @ targets)
                if tpl.kind == "linear":
                    cand = np.concatenate([coef[:n].T.ravel(), coef[n]])
                else:
                    cand = coef.T.ravel()
                score = bounded(tpl.build(cand))
                if score > best:
                    alpha, best = cand, score
            # the regression pins the loop bandwidth to whatever the fit
            # noise dictates; sweep the feedback strength, re-anchor each
            # variant on the trajectory, and pull it back to feasibility
            u0 = targets[0]
            for t in (1.0, 0.5, 0.25):
                cand = tpl.anchor(t * alpha, prog.x0, u0)
                res = minimize(neg_templ_margin, cand, method="Nelder-Mead",
                               options={"maxiter": 200 * cand.size,
                                        "fatol": options.tol,
                                        "xatol": options.tol})
                if res.fun < neg_templ_margin(cand):
                    cand = res.x
                scored.append((-quality(cand), cand))
        scored.sort(key=lambda s: s[0])
        alphas = []
        for _, cand in scored:
            if any(np.abs(cand - a).max() <= 1e-3 * (1.0 + np.abs(a).max())
                   for a in alphas):
                continue
            alphas.append(cand)
            if len(alphas) == count:
                break

    starts = []
    for alpha in alphas:
        theta = np.zeros(prog.n_theta)
        k = prog.n_theta - tpl.n_params
        theta[k:] = alpha
        if prog.eps_free:
            _, _, inputs = _nominal_score(prog, tpl.build(alpha))
            peak = float(np.abs(inputs).max()) if inputs.size else 0.0
            theta[k - 1] = peak if math.isfinite(peak) else options.eps_scale
        starts.append(theta)
    return starts


def _start_points(prog: _Program, options: SolveOptions) -> list[np.ndarray]:
    """Deterministic start list: origin, caller seeds, best presamples."""
    d = prog.n_theta
    scales = np.full(d, options.scale)
    j = 0
    if prog.mu_free:
        scales[0] = options.mu_scale
        j = 1
    if prog.eps_free:
        scales[j] = options.eps_scale

    starts = [np.zeros(d)]
    for extra in options.extra_starts:
        extra = np.asarray(extra, dtype=float)
        if extra.shape != (d,):
            raise DimensionMismatchError(
                f"extra start has shape {extra.shape}, decision has {d} entries")
        starts.append(extra.copy())

    budget = max(options.restarts, len(starts))
    key = np.array([options.seed & (2**64 - 1), _START_STREAM], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    n_lift = min(options.lifted_starts, budget - len(starts))
    if n_lift > 0:
        starts.extend(_lifted_starts(prog, options, rng, n_lift))

    n_fill = budget - len(starts)
    if n_fill > 0 and options.presamples > 0:
        draws = rng.uniform(-1.0, 1.0, size=(options.presamples, d)) * scales
        # anchor each draw's controller to a sane input at x0
        u_scale = prog.obj.eps0 if prog.obj.eps0 is not None else options.scale
        u0s = rng.uniform(-u_scale, u_scale, size=(options.presamples, prog.template.m))
        k = d - prog.template.n_params
        for r in range(options.presamples):
            draws[r, k:] = prog.template.anchor(draws[r, k:], prog.x0, u0s[r])
        ranked = sorted(draws, key=lambda th: prog.penalized(th, options.rho0))
        starts.extend(np.asarray(th) for th in ranked[:n_fill])
    return starts[:budget], scales


def solve_scenario(system, sets, x0, template: ControllerTemplate,
                   scenarios: ScenarioSet, objective: ScenarioObjective,
                   options: SolveOptions | None = None) -> ScenarioCertificate:
    """Tune (mu, eps, alpha) against every sampled disturbance sequence.

    Maximizes  w1*mu - w2*eps  subject to: for each scenario i, the rollout
    under disturbance mu*delta_i satisfies the spec and keeps every input
    inside the eps box.  Exact penalty with escalating rho turns that into
    the unconstrained landscapes Nelder-Mead can chew on; the best feasible
    result across all starts is polished and returned.  Raises
    :class:`NoFeasiblePointError` when no start produces margins above
    -margin_slack.
    """
    options = options or SolveOptions()
    prog = _Program(system, sets, x0, template, scenarios, objective, options)
    starts, scales = _start_points(prog, options)

    survivors: list[np.ndarray] = []
    for start in starts:
        theta = prog.center(start, scales, options.max_iter)
        rho = options.rho0
        feasible = False
        while True:
            simplex = np.vstack([theta] * (prog.n_theta + 1))
            for j in range(prog.n_theta):
                simplex[j + 1, j] += 0.25 * scales[j]
            res = minimize(prog.penalized, theta, args=(rho,),
                           method="Nelder-Mead",
                           options={"initial_simplex": simplex,
                                    "maxiter": options.max_iter,
                                    "fatol": options.tol,
                                    "xatol": options.tol})
            theta = res.x
            if float(prog.margins_at(theta).min()) >= -options.margin_slack:
                feasible = True
                break
            rho *= options.rho_growth
            if rho > options.rho_cap:
                break
        if feasible:
            survivors.append(prog.polish(theta))

    if not survivors:
        raise NoFeasiblePointError(
            f"no decision satisfied all {scenarios.M} scenarios across "
            f"{len(starts)} starts (template {template.kind})")

    def value_of(theta: np.ndarray) -> float:
        mu, eps, _ = prog.unpack(theta)
        return prog.objective_value(mu, eps)

    survivors.sort(key=value_of, reverse=True)
    best_theta = survivors[0]
    best_value = value_of(best_theta)
    picks = [survivors[0]]
    for th in survivors[1:]:
        if len(picks) == 2:
            break
        gap = np.abs(th - picks[0]).max() / (1.0 + np.abs(picks[0]).max())
        if gap > 1e-3:
            picks.append(th)
    if options.refine:
        # profile refinement is the expensive stage; spend it on the two
        # most promising basins only
        for theta in picks:
            theta = prog.refine(theta, scales, options.max_iter)
            # alternate re-centering at the raised mu with further raises;
            # coordinate ascent on the largest mu the template can support
            for _ in range(8):
                mu_prev, eps_prev, _ = prog.unpack(theta)
                trial = prog.polish(prog.center(theta, scales,
                                                options.max_iter))
                mu_t, eps_t, _ = prog.unpack(trial)
                if (prog.objective_value(mu_t, eps_t)
                        <= prog.objective_value(mu_prev, eps_prev)
                        + options.tol):
                    break
                theta = trial
            value = value_of(theta)
            if value > best_value:
                best_value, best_theta = value, theta.copy()

    mu, eps, alpha = prog.unpack(best_theta)
    margins = prog.margins(mu, eps, alpha)
    if eps is None:
        # unconstrained inputs: report the authority the loop actually used
        _, inputs = rollout_batch(system, template.build(alpha),
                                  prog.x0, mu * prog.delta)
        eps_report = float(np.abs(inputs).max()) if inputs.size else 0.0
    else:
        eps_report = eps
    return ScenarioCertificate(
        mu=float(mu), eps=float(eps_report), alpha=np.asarray(alpha, float),
        objective=float(best_value), M=scenarios.M, seed=scenarios.seed,
        template=template.describe(), worst_margin=float(margins.min()),
        cap_hit=bool(prog.mu_free and mu >= options.mu_cap * (1 - 1e-12)))


# ---------------------------------------------------------------------------
# support constraints and the risk bound


def support_count(result: ScenarioCertificate, system, sets, x0,
                  template: ControllerTemplate, scenarios: ScenarioSet,
                  objective: ScenarioObjective,
                  options: SolveOptions | None = None) -> int:
    """Number of scenarios whose removal moves the optimum.

    Each of the M reduced programs is re-solved with the same seeds and
    start list plus the incumbent decision; scenario i counts as support
    when the re-solve shifts the objective or the decision by more than
    1e-6.  Dropping a constraint keeps the incumbent feasible, so ties
    resolve to the incumbent: unless the re-solve finds a strictly better
    objective, the reduced program's optimal set still contains the
    incumbent and the solution has not moved.  Without that rule every
    removal would register optimizer noise as movement.  Solver failures
    are re-raised with the offending index.
    """
    options = options or SolveOptions()
    theta_star = result.decision()
    incumbent = _strip_fixed(theta_star, objective)
    seeded = replace(options,
                     extra_starts=tuple(options.extra_starts) + (incumbent,))
    count = 0
    for i in range(scenarios.M):
        try:
            redo = solve_scenario(system, sets, x0, template,
                                  scenarios.without(i), objective, seeded)
        except NoFeasiblePointError as exc:
            raise NoFeasiblePointError(
                f"removal re-solve without scenario {i} failed: {exc}") from exc
        if redo.objective <= result.objective + 1e-6:
            continue
        moved = (abs(redo.objective - result.objective) > 1e-6
                 or np.abs(redo.decision() - theta_star).max() > 1e-6)
        count += int(moved)
    return count


def _strip_fixed(decision: np.ndarray, objective: ScenarioObjective) -> np.ndarray:
    """Project a full (mu, eps, alpha...) vector onto the free coordinates."""
    parts = []
    if objective.mu_free:
        parts.append(decision[0:1])
    if objective.eps_free:
        parts.append(decision[1:2])
    parts.append(decision[2:])
    return np.concatenate(parts)


def risk_bound(k: int, M: int, beta: float) -> float:
    """A-posteriori violation bound b(k) for complexity k out of M scenarios.

    b(k) = 1 - t(k) where t(k) is the root in (0, 1) of

        (beta/M) * sum_{m=k}^{M-1} C(m,k) t^(m-k)  -  C(M,k) t^(M-k) = 0,

    and b(M) = 1.  The left side is beta/M > 0 as t -> 0 and negative at
    t = 1, so bisection brackets the root; binomials are handled in log
    space to survive M in the hundreds.
    """
    if not 0 <= k <= M:
        raise ValueError(f"complexity k={k} outside 0..{M}")
    if not 0 < beta <= 1:
        raise ValueError(f"confidence beta={beta} outside (0, 1]")
    if k == M:
        return 1.0

    ms = np.arange(k, M)
    log_sum_coef = gammaln(ms + 1) - gammaln(k + 1) - gammaln(ms - k + 1)
    log_lead = gammaln(M + 1) - gammaln(k + 1) - gammaln(M - k + 1)
    log_beta_over_M = math.log(beta) - math.log(M)

    def above(t: float) -> bool:
        lt = math.log(t)
        lhs = log_beta_over_M + logsumexp(log_sum_coef + (ms - k) * lt)
        return lhs - (log_lead + (M - k) * lt) > 0.0

    lo, hi = 1e-300, 1.0 - 1e-16
    if above(hi):
        return 1.0 - hi
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if above(mid):
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12:
            break
    return 1.0 - 0.5 * (lo + hi)


def empirical_violation(result, system, sets, x0,
                        template: ControllerTemplate,
                        fresh: ScenarioSet) -> float:
    """Fraction of fresh scenarios that defeat an already-tuned decision.

    ``result`` is a :class:`ScenarioCertificate` or a (mu, eps, alpha)
    triple; eps may be None for unconstrained inputs.  A scenario counts
    as a violation when the rollout leaves the spec or an input leaves
    the eps box.
    """
    if fresh.M == 0 or fresh.samples.size == 0:
        raise ValueError("empirical check needs a nonempty fresh scenario set")
    if isinstance(result, ScenarioCertificate):
        mu, eps, alpha = result.mu, result.eps, result.alpha
    else:
        mu, eps, alpha = result
    controller = template.build(np.asarray(alpha, dtype=float))
    states, inputs = rollout_batch(system, controller, np.asarray(x0, float),
                                   float(mu) * fresh.samples)
    m = specs.margin_batch(states, sets)
    if eps is not None and np.isfinite(eps):
        with np.errstate(invalid="ignore"):
            peak = np.abs(inputs).max(axis=(1, 2))
        m = np.minimum(m, eps - peak)
    m = np.where(np.isfinite(m), m, -_BIG)
    return float(np.count_nonzero(m < 0.0) / fresh.M)


def run_pipeline(system, sets, x0, template: ControllerTemplate,
                 scenarios: ScenarioSet, objective: ScenarioObjective,
                 beta: float, options: SolveOptions | None = None,
                 fresh: ScenarioSet | None = None) -> ScenarioCertificate:
    """Solve, count support scenarios, and attach the risk bound.

    When ``fresh`` is given the certificate also carries the Monte-Carlo
    violation rate on that held-out set.
    """
    cert = solve_scenario(system, sets, x0, template, scenarios, objective,
                          options)
    s_M = support_count(cert, system, sets, x0, template, scenarios,
                        objective, options)
    bound = risk_bound(s_M, scenarios.M, beta)
    rate = None
    if fresh is not None:
        rate = empirical_violation(cert, system, sets, x0, template, fresh)
    return replace(cert, s_M=s_M, beta=beta, bound=bound, violation_rate=rate)
