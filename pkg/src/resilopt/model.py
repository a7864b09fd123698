"""Discrete-time system models, controller templates and trajectory rollout.

Systems evolve on a finite horizon ``k = 0 .. N-1`` as

    x(k+1) = f(k, x(k), u(k)) + d(k)

where ``d`` is an additive disturbance entering every state coordinate.
Linear time-varying instances expose their ``A_k``/``B_k`` matrices so the
constraint machinery can reason about them in closed form; nonlinear
instances only expose the transition map and are handled by sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Callable

import numpy as np

from resilopt.errors import DimensionMismatchError, RolloutDivergedError


def _as_matrix_list(M, count: int, shape: tuple[int, int], name: str) -> list[np.ndarray]:
    """Normalize a single matrix or a length-``count`` sequence of matrices."""
    arr = np.asarray(M, dtype=float)
    if arr.ndim == 2:
        mats = [arr.copy() for _ in range(count)]
    elif arr.ndim == 3:
        mats = [np.array(a, dtype=float) for a in arr]
    else:
        raise DimensionMismatchError(f"{name} must be a matrix or a sequence of matrices")
    if len(mats) != count:
        raise DimensionMismatchError(f"expected {count} {name} matrices, got {len(mats)}")
    for a in mats:
        if a.shape != shape:
            raise DimensionMismatchError(f"{name} matrix has shape {a.shape}, expected {shape}")
        if not np.isfinite(a).all():
            raise DimensionMismatchError(f"{name} matrix contains non-finite entries")
    return mats


class LTVSystem:
    """Linear time-varying dynamics x(k+1) = A_k x(k) + B_k u(k) + d(k).

    Parameters
    ----------
    A : array or sequence of arrays
        State matrices, either one (n, n) matrix reused on every step or a
        sequence of ``horizon`` matrices.
    B : array or sequence of arrays
        Input matrices, (n, m), same broadcasting rule.
    horizon : int
        Number of transitions N (the trajectory has N + 1 states).
    """

    def __init__(self, A, B, horizon: int):
        if horizon < 1:
            raise DimensionMismatchError("horizon must be at least 1")
        A0 = np.asarray(A, dtype=float)
        n = A0.shape[-1]
        B0 = np.asarray(B, dtype=float)
        m = B0.shape[-1]
        self.n = int(n)
        self.m = int(m)
        self.N = int(horizon)
        self.A = _as_matrix_list(A, self.N, (self.n, self.n), "A")
        self.B = _as_matrix_list(B, self.N, (self.n, self.m), "B")

    @property
    def is_linear(self) -> bool:
        return True

    def step(self, k: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return x @ self.A[k].T + u @ self.B[k].T


class NonlinearSystem:
    """Nonlinear dynamics x(k+1) = f(k, x(k), u(k)) + d(k).

    ``transition(k, x, u)`` must accept batched states/inputs with shapes
    (..., n) and (..., m) and return the next states with shape (..., n).
    """

    def __init__(self, transition: Callable[[int, np.ndarray, np.ndarray], np.ndarray],
                 state_dim: int, input_dim: int, horizon: int, name: str = "custom"):
        if horizon < 1:
            raise DimensionMismatchError("horizon must be at least 1")
        self.transition = transition
        self.n = int(state_dim)
        self.m = int(input_dim)
        self.N = int(horizon)
        self.name = name

    @property
    def is_linear(self) -> bool:
        return False

    def step(self, k: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.transition(k, x, u)


@dataclass
class LinearFeedback:
    """Affine state feedback u = alpha1 @ x + alpha2."""

    alpha1: np.ndarray
    alpha2: np.ndarray

    def __post_init__(self):
        self.alpha1 = np.atleast_2d(np.asarray(self.alpha1, dtype=float))
        self.alpha2 = np.atleast_1d(np.asarray(self.alpha2, dtype=float))
        if self.alpha1.shape[0] != self.alpha2.shape[0]:
            raise DimensionMismatchError("alpha1 and alpha2 disagree on the input dimension")

    def __call__(self, k: int, x: np.ndarray) -> np.ndarray:
        return x @ self.alpha1.T + self.alpha2


@dataclass
class PolynomialFeedback:
    """Polynomial state feedback u = coefficients @ phi(x).

    ``phi`` is the graded monomial basis of :func:`monomial_basis`; the
    coefficient matrix has one row per input channel and one column per
    basis element.
    """

    degree: int
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.atleast_2d(np.asarray(self.coefficients, dtype=float))
        if self.degree < 0:
            raise DimensionMismatchError("polynomial degree must be nonnegative")

    def __call__(self, k: int, x: np.ndarray) -> np.ndarray:
        n = np.asarray(x).shape[-1]
        expected = basis_size(n, self.degree)
        if self.coefficients.shape[1] != expected:
            raise DimensionMismatchError(
                f"coefficient matrix has {self.coefficients.shape[1]} columns, "
                f"the degree-{self.degree} basis in {n} variables has {expected}")
        return monomial_basis(x, self.degree) @ self.coefficients.T


@dataclass
class OpenLoopSequence:
    """Fixed input sequence u(0), ..., u(N-1), independent of the state."""

    inputs: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))

    def __call__(self, k: int, x: np.ndarray) -> np.ndarray:
        u = self.inputs[k]
        return np.broadcast_to(u, np.asarray(x).shape[:-1] + u.shape)


Controller = Callable[[int, np.ndarray], np.ndarray]


@dataclass
class Trajectory:
    """A realized run: states (N+1, n) and the inputs (N, m) that produced it."""

    states: np.ndarray
    inputs: np.ndarray

    def max_input_norm(self) -> float:
        """Largest infinity-norm of any applied input."""
        if self.inputs.size == 0:
            return 0.0
        return float(np.abs(self.inputs).max())


def _check_disturbance(disturbance, N: int, n: int) -> np.ndarray:
    if disturbance is None:
        return np.zeros((N, n))
    d = np.asarray(disturbance, dtype=float)
    if d.shape != (N, n):
        raise DimensionMismatchError(
            f"disturbance sequence must have shape ({N}, {n}), got {d.shape}")
    return d


def rollout(system, controller: Controller, x0, disturbance=None) -> Trajectory:
    """Simulate the closed (or open) loop from ``x0`` under one disturbance
    sequence.  ``disturbance=None`` means the nominal run d == 0.

    Raises :class:`RolloutDivergedError` if any state becomes non-finite.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (system.n,):
        raise DimensionMismatchError(f"x0 must have shape ({system.n},), got {x0.shape}")
    d = _check_disturbance(disturbance, system.N, system.n)
    states, inputs = rollout_batch(system, controller, x0, d[None, :, :], check=True)
    return Trajectory(states=states[0], inputs=inputs[0])


def rollout_batch(system, controller: Controller, x0, disturbances: np.ndarray,
                  check: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Simulate many disturbance sequences at once.

    Parameters
    ----------
    disturbances : (S, N, n) array
        One sequence per row of the leading axis.
    check : bool
        When true, raise :class:`RolloutDivergedError` at the first step that
        produces a non-finite state.  When false the caller inspects the
        result; non-finite values propagate.

    Returns
    -------
    states : (S, N+1, n), inputs : (S, N, m)
    """
    x0 = np.asarray(x0, dtype=float)
    d = np.asarray(disturbances, dtype=float)
    S, N, n = d.shape
    if N != system.N or n != system.n:
        raise DimensionMismatchError(
            f"disturbance batch must have shape (S, {system.N}, {system.n})")
    states = np.empty((S, N + 1, n))
    inputs = np.empty((S, N, system.m))
    states[:, 0, :] = x0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(N):
            xk = states[:, k, :]
            uk = np.asarray(controller(k, xk), dtype=float)
            if uk.shape != (S, system.m):
                raise DimensionMismatchError(
                    f"controller returned shape {uk.shape} at step {k}, "
                    f"expected ({S}, {system.m})")
            inputs[:, k, :] = uk
            states[:, k + 1, :] = system.step(k, xk, uk) + d[:, k, :]
            if check and not np.isfinite(states[:, k + 1, :]).all():
                raise RolloutDivergedError(k + 1)
    return states, inputs


class TransitionProducts:
    """Cumulative transition factors of a linear loop.

    ``factor(k, i)`` is the matrix that propagates an additive term injected
    just after step ``i`` (a disturbance d(i), or B_i u(i)) into the state at
    time ``k``; ``factor(k, -1)`` propagates the initial state.  With the
    per-step loop matrix M_j (A_j + B_j alpha1 when a feedback gain is
    installed, A_j otherwise):

        factor(k, i)  = M_{k-1} M_{k-2} ... M_{i+1}      for -1 <= i < k
        factor(k, k-1) = I
        factor(k, i)  = 0                                 for i >= k

    so x(k) = factor(k,-1) x(0) + sum_i factor(k,i) (B_i u(i) + d(i)).
    """

    def __init__(self, system: LTVSystem, feedback_gain: np.ndarray | None = None):
        if not system.is_linear:
            raise DimensionMismatchError("transition products need a linear system")
        n = system.n
        if feedback_gain is None:
            loop = [a.copy() for a in system.A]
        else:
            gain = np.atleast_2d(np.asarray(feedback_gain, dtype=float))
            if gain.shape != (system.m, n):
                raise DimensionMismatchError(
                    f"feedback gain must have shape ({system.m}, {n}), got {gain.shape}")
            loop = [system.A[j] + system.B[j] @ gain for j in range(system.N)]
        self.n = n
        self.N = system.N
        # table[k][j] holds factor(k, j - 1); row k has k + 1 defined entries
        table: list[list[np.ndarray]] = [[np.eye(n)]]
        for k in range(1, system.N + 1):
            row = [np.eye(n)]           # factor(k, k-1)
            for i in range(k - 2, -2, -1):
                row.insert(0, row[0] @ loop[i + 1])
            table.append(row)
        self._table = table
        self._zero = np.zeros((n, n))

    def factor(self, k: int, i: int) -> np.ndarray:
        if not 0 <= k <= self.N:
            raise DimensionMismatchError(f"time index {k} outside 0..{self.N}")
        if i < -1:
            raise DimensionMismatchError(f"injection index {i} below -1")
        if i >= k:
            return self._zero
        return self._table[k][i + 1]


def closed_loop_products(system: LTVSystem, alpha1: np.ndarray | None = None) -> TransitionProducts:
    """Transition factors of the loop closed with gain ``alpha1``.

    ``alpha1=None`` gives the open-loop factors (products of the bare A_k).
    """
    return TransitionProducts(system, alpha1)


def monomial_exponents(n: int, degree: int) -> np.ndarray:
    """Exponent table of the monomial basis, shape (D, n).

    Graded order: total degree 0, 1, ..., ``degree``; within a degree the
    first variable carries the highest power first.  Row 0 is the constant.
    """
    rows = []
    for d in range(degree + 1):
        for idx in combinations_with_replacement(range(n), d):
            e = np.zeros(n, dtype=int)
            for j in idx:
                e[j] += 1
            rows.append(e)
    return np.array(rows, dtype=int).reshape(len(rows), n)


def basis_size(n: int, degree: int) -> int:
    """Number of monomials in n variables up to the given total degree."""
    return math.comb(n + degree, n)


def monomial_basis(x, degree: int) -> np.ndarray:
    """Evaluate the graded monomial basis at ``x``.

    ``x`` has shape (..., n); the result has shape (..., D) with
    D = C(n + degree, n) and the constant 1 in position 0.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    exps = monomial_exponents(n, degree)
    with np.errstate(over="ignore", invalid="ignore"):
        return np.prod(x[..., None, :] ** exps, axis=-1)


def _acc_factory(horizon: int, params: dict | None = None) -> NonlinearSystem:
    """Car following a constant-speed lead vehicle.

    State (h, v): headway to the lead car and own speed.  Input F: wheel
    force, fighting a quadratic drag/rolling-resistance law.
    """
    p = {"mass": 1370.0, "f0": 51.0709, "f1": 0.3494, "f2": 0.4161,
         "lead_speed": 14.4, "dt": 0.5}
    p.update(params or {})
    mass, f0, f1, f2 = p["mass"], p["f0"], p["f1"], p["f2"]
    v_lead, dt = p["lead_speed"], p["dt"]

    def transition(k, x, u):
        h, v = x[..., 0], x[..., 1]
        force = u[..., 0]
        h_next = h + dt * (v_lead - v)
        v_next = v + (dt / mass) * (force - f0 - f1 * v - f2 * v * v)
        return np.stack([h_next, v_next], axis=-1)

    return NonlinearSystem(transition, state_dim=2, input_dim=1, horizon=horizon, name="acc")


def _collision_factory(horizon: int, params: dict | None = None) -> NonlinearSystem:
    """Vehicle crossing behind a constant-speed lead vehicle.

    State (rx, ry, v): relative position of the lead car along its lane,
    own progress along the crossing direction, own speed.  Input F: wheel
    force with quadratic drag.
    """
    p = {"mass": 1370.0, "f1": 0.3494, "f2": 0.4161, "lead_speed": 15.0, "dt": 0.3}
    p.update(params or {})
    mass, f1, f2 = p["mass"], p["f1"], p["f2"]
    v_lead, dt = p["lead_speed"], p["dt"]

    def transition(k, x, u):
        rx, ry, v = x[..., 0], x[..., 1], x[..., 2]
        force = u[..., 0]
        rx_next = rx - dt * v_lead
        ry_next = ry + dt * v
        v_next = v + (dt / mass) * (force - f1 * v - f2 * v * v)
        return np.stack([rx_next, ry_next, v_next], axis=-1)

    return NonlinearSystem(transition, state_dim=3, input_dim=1, horizon=horizon, name="collision")


NONLINEAR_MODELS: dict[str, Callable[..., NonlinearSystem]] = {
    "acc": _acc_factory,
    "collision": _collision_factory,
}


def make_nonlinear_system(name: str, horizon: int, params: dict | None = None) -> NonlinearSystem:
    """Instantiate one of the bundled nonlinear models by name."""
    try:
        factory = NONLINEAR_MODELS[name]
    except KeyError:
        known = ", ".join(sorted(NONLINEAR_MODELS))
        raise DimensionMismatchError(f"unknown model '{name}' (known: {known})") from None
    return factory(horizon, params)
