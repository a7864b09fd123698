"""Robust-constraint blocks for box-bounded disturbances.

For a linear loop the state at time k is affine in the stacked disturbance
vector, so a per-step polytopic requirement G_k x(k) <= H_k for every
disturbance sequence with ||d(i)||_inf <= mu reduces to finitely many rows

    mu * ||E_i||_1  <=  F_i,

one per spec (and input-bound) row.  This module builds the (E, F) blocks
for closed-loop affine feedback and for open-loop input sequences, exposes
the l1 reduction, the explicit multiplier (Farkas) certificate used for
fidelity testing, and a brute-force vertex certifier that independently
checks robustness by enumerating the extreme disturbance sequences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from resilopt import specs
from resilopt.errors import (
    DimensionMismatchError,
    EnumerationGuardError,
    UnsupportedStructureError,
)
from resilopt.model import (
    LinearFeedback,
    LTVSystem,
    OpenLoopSequence,
    closed_loop_products,
    rollout_batch,
)


@dataclass
class FarkasBlocks:
    """Stacked robust rows: disturbance map E and affine bound F.

    Row i requires  mu * sup{E_i y : ||y||_inf <= 1} = mu*||E_i||_1 <= F_i
    where F depends affinely on the remaining decisions:

        closed loop:  F = F_const + F_alpha2 @ alpha2 + F_eps * eps
        open loop:    F = F_const + F_v @ v          (v = stacked inputs)

    Rows stack state blocks for k = 0..N first, then (closed loop) input
    blocks for k = 0..N-1 with 2m rows each.  E's first n columns multiply
    the padded zero block of the stacked disturbance and are always zero.
    """

    E: np.ndarray
    F_const: np.ndarray
    F_alpha2: np.ndarray | None = None
    F_eps: np.ndarray | None = None
    F_v: np.ndarray | None = None
    row_labels: list[tuple[str, int, int]] = field(default_factory=list)
    n: int = 0
    m: int = 0
    N: int = 0
    n_state_rows: int = 0

    @property
    def n_rows(self) -> int:
        return self.E.shape[0]

    @property
    def A_b(self) -> np.ndarray:
        """Sign matrix [I; -I] of the unit-box disturbance support."""
        dim = self.n * (self.N + 1)
        return np.vstack([np.eye(dim), -np.eye(dim)])

    @property
    def B_b(self) -> np.ndarray:
        """All-ones right-hand side of the unit-box support."""
        return np.ones(2 * self.n * (self.N + 1))

    def state_rows(self) -> "FarkasBlocks":
        """The blocks restricted to the state (spec) rows."""
        s = self.n_state_rows
        return FarkasBlocks(
            E=self.E[:s],
            F_const=self.F_const[:s],
            F_alpha2=None if self.F_alpha2 is None else self.F_alpha2[:s],
            F_eps=None if self.F_eps is None else self.F_eps[:s],
            F_v=None if self.F_v is None else self.F_v[:s],
            row_labels=self.row_labels[:s],
            n=self.n, m=self.m, N=self.N, n_state_rows=s)


def _stacked_or_raise(sets: specs.TimedSets, n: int, N: int):
    if not sets.polytopic:
        raise UnsupportedStructureError(
            "robust constraint blocks need a polytopic specification")
    if sets.horizon != N:
        raise DimensionMismatchError(
            f"spec horizon {sets.horizon} does not match system horizon {N}")
    out = []
    for k in range(N + 1):
        G, H = sets.stacked(k)
        if G.shape[0] and G.shape[1] != n:
            raise DimensionMismatchError(
                f"spec rows at step {k} have {G.shape[1]} columns, state has {n}")
        out.append((G if G.shape[0] else np.zeros((0, n)), H))
    return out


def closed_loop_blocks(system: LTVSystem, sets: specs.TimedSets, x0,
                       alpha1) -> FarkasBlocks:
    """Robust rows of the loop closed with u = alpha1 x + alpha2.

    The affine parts of F expose alpha2 and the input bound eps as free
    decisions; alpha1 is baked into E.  Input-bound rows are always built;
    callers with an unbounded input drop them by ``state_rows()``.
    """
    n, m, N = system.n, system.m, system.N
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (n,):
        raise DimensionMismatchError(f"x0 must have shape ({n},)")
    alpha1 = np.atleast_2d(np.asarray(alpha1, dtype=float))
    if alpha1.shape != (m, n):
        raise DimensionMismatchError(f"alpha1 must have shape ({m}, {n})")
    stacked = _stacked_or_raise(sets, n, N)
    products = closed_loop_products(system, alpha1)
    width = n * (N + 1)
    A_u = np.vstack([np.eye(m), -np.eye(m)])

    # per step: disturbance map of x(k) and the affine pieces of its drift
    E_k = np.zeros((N + 1, n, width))
    drift0 = np.zeros((N + 1, n))          # factor(k,-1) x0
    drift_a2 = np.zeros((N + 1, n, m))     # sum_i factor(k,i) B_i
    for k in range(N + 1):
        drift0[k] = products.factor(k, -1) @ x0
        for i in range(k):
            E_k[k][:, (i + 1) * n:(i + 2) * n] = products.factor(k, i)
            drift_a2[k] += products.factor(k, i) @ system.B[i]

    E_rows, Fc_rows, Fa_rows, Fe_rows, labels = [], [], [], [], []
    for k in range(N + 1):
        G, H = stacked[k]
        if G.shape[0]:
            E_rows.append(G @ E_k[k])
            Fc_rows.append(H - G @ drift0[k])
            Fa_rows.append(-G @ drift_a2[k])
            Fe_rows.append(np.zeros(G.shape[0]))
            labels += [("state", k, r) for r in range(G.shape[0])]
    n_state = sum(e.shape[0] for e in E_rows)
    for k in range(N):
        E_rows.append(A_u @ alpha1 @ E_k[k])
        Fc_rows.append(-A_u @ (alpha1 @ drift0[k]))
        Fa_rows.append(-A_u @ (alpha1 @ drift_a2[k] + np.eye(m)))
        Fe_rows.append(np.ones(2 * m))
        labels += [("input", k, r) for r in range(2 * m)]

    return FarkasBlocks(
        E=np.vstack(E_rows) if E_rows else np.zeros((0, width)),
        F_const=np.concatenate(Fc_rows) if Fc_rows else np.zeros(0),
        F_alpha2=np.vstack(Fa_rows) if Fa_rows else np.zeros((0, m)),
        F_eps=np.concatenate(Fe_rows) if Fe_rows else np.zeros(0),
        row_labels=labels, n=n, m=m, N=N, n_state_rows=n_state)


def open_loop_blocks(system: LTVSystem, sets: specs.TimedSets, x0) -> FarkasBlocks:
    """Robust rows for a fixed input sequence.

    F is affine in the stacked inputs v = (u(0), ..., u(N-1)); input-bound
    handling stays with the caller since the inputs are decision variables
    themselves.
    """
    n, m, N = system.n, system.m, system.N
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (n,):
        raise DimensionMismatchError(f"x0 must have shape ({n},)")
    stacked = _stacked_or_raise(sets, n, N)
    products = closed_loop_products(system, None)
    width = n * (N + 1)

    E_rows, Fc_rows, Fv_rows, labels = [], [], [], []
    for k in range(N + 1):
        G, H = stacked[k]
        if not G.shape[0]:
            continue
        E_k = np.zeros((n, width))
        Fv_k = np.zeros((n, m * N))
        for i in range(k):
            E_k[:, (i + 1) * n:(i + 2) * n] = products.factor(k, i)
            Fv_k[:, i * m:(i + 1) * m] = products.factor(k, i) @ system.B[i]
        E_rows.append(G @ E_k)
        Fc_rows.append(H - G @ (products.factor(k, -1) @ x0))
        Fv_rows.append(-G @ Fv_k)
        labels += [("state", k, r) for r in range(G.shape[0])]

    n_rows = sum(e.shape[0] for e in E_rows)
    return FarkasBlocks(
        E=np.vstack(E_rows) if E_rows else np.zeros((0, width)),
        F_const=np.concatenate(Fc_rows) if Fc_rows else np.zeros(0),
        F_v=np.vstack(Fv_rows) if Fv_rows else np.zeros((0, m * N)),
        row_labels=labels, n=n, m=m, N=N, n_state_rows=n_rows)


def l1_row_norms(blocks: FarkasBlocks) -> np.ndarray:
    """Per-row l1 norms of E; the robust rows read mu*norms <= F."""
    return np.abs(blocks.E).sum(axis=1)


def explicit_multiplier(blocks: FarkasBlocks, mu: float) -> tuple[np.ndarray, np.ndarray]:
    """The closed-form nonnegative multiplier P = [P+, P-] with
    P @ A_b = mu E and P @ B_b = mu * ||E_i||_1 row-wise; it witnesses the
    l1 reduction whenever mu*||E_i||_1 <= F_i."""
    P_plus = np.maximum(mu * blocks.E, 0.0)
    P_minus = np.maximum(-mu * blocks.E, 0.0)
    return P_plus, P_minus


@dataclass
class VertexCertificate:
    """Outcome of brute-force robustness checking at the disturbance-box
    vertices.  ``worst_margin`` is the smallest of the spec margin and (when
    an input bound is given) the input slack over all vertices; ``witness``
    is the disturbance sequence attaining it."""

    satisfied: bool
    worst_margin: float
    witness: np.ndarray
    mu: float
    eps: float | None
    vertices: int
    max_input_norm: float
    tol: float

    def to_dict(self) -> dict:
        return {
            "satisfied": bool(self.satisfied),
            "worst_margin": float(self.worst_margin),
            "witness": self.witness.tolist(),
            "mu": float(self.mu),
            "eps": None if self.eps is None else float(self.eps),
            "vertices": int(self.vertices),
            "max_input_norm": float(self.max_input_norm),
        }


ENUMERATION_LIMIT = 24


def certify_vertices(system, controller, x0, mu: float, sets: specs.TimedSets,
                     eps: float | None = None, tol: float = 1e-9) -> VertexCertificate:
    """Check a controller's robustness by exhausting the 2^(nN) extreme
    disturbance sequences (exact for linear loops and polytopic specs; a
    necessary check otherwise).

    ``eps=None`` or an infinite ``eps`` skips the input-bound check.
    """
    n, N = system.n, system.N
    bits = n * N
    if bits > ENUMERATION_LIMIT:
        raise EnumerationGuardError(
            f"certification needs 2^{bits} rollouts; the guard allows at most "
            f"2^{ENUMERATION_LIMIT}")
    if mu < 0:
        raise DimensionMismatchError("mu must be nonnegative")
    x0 = np.asarray(x0, dtype=float)
    check_inputs = eps is not None and np.isfinite(eps)

    total = 1 << bits
    chunk = min(total, 1 << 15)
    # bit (k*n + c) drives component c of d(k)
    shifts = np.arange(bits, dtype=np.int64)
    worst = np.inf
    worst_d = np.zeros((N, n))
    max_u = 0.0
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        signs = (((idx[:, None] >> shifts) & 1) * 2 - 1).astype(float)
        d = mu * signs.reshape(-1, N, n)
        states, inputs = rollout_batch(system, controller, x0, d, check=False)
        margins = specs.margin_batch(states, sets)
        u_norm = np.abs(inputs).reshape(inputs.shape[0], -1).max(axis=1)
        u_norm = np.where(np.isfinite(u_norm), u_norm, np.inf)
        max_u = max(max_u, float(u_norm.max()))
        if check_inputs:
            margins = np.minimum(margins, eps - u_norm)
        j = int(np.argmin(margins))
        if margins[j] < worst:
            worst = float(margins[j])
            worst_d = d[j].copy()
    return VertexCertificate(
        satisfied=bool(worst >= -tol),
        worst_margin=worst,
        witness=worst_d,
        mu=float(mu),
        eps=None if eps is None or not np.isfinite(eps) else float(eps),
        vertices=total,
        max_input_norm=float(max_u),
        tol=tol)
