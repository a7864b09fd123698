"""State-space regions, the specification language and its compiled form.

A specification constrains the trajectory x(0..N) of a finite-horizon run.
Region atoms are named sets; formulas combine them with step-indexed
temporal operators:

    phi ::= atom
          | next^M ( atom )            constrain step M
          | always[M1,M2] ( atom )     constrain every step in M1..M2
          | eventually[M1,M2] ( atom ) constrain some step in M1..M2
          | phi & phi

``compile`` lowers a formula to per-step set constraints, ``margin`` scores
a trajectory against them: nonnegative exactly when the run satisfies the
formula (regions are closed, so the boundary counts as satisfying).
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from resilopt.errors import DimensionMismatchError, SpecSyntaxError, UnsupportedStructureError

_BRANCH_GUARD = 65536


class HalfspacePolytope:
    """Intersection of halfspaces {x : G x <= h}.

    The margin of a point is the smallest row slack min_i(h_i - g_i . x);
    its sign tells membership, its magnitude is row-scale dependent.
    """

    def __init__(self, G, h, name: str = ""):
        self.G = np.atleast_2d(np.asarray(G, dtype=float))
        self.h = np.atleast_1d(np.asarray(h, dtype=float))
        if self.G.shape[0] != self.h.shape[0]:
            raise DimensionMismatchError("G and h disagree on the number of rows")
        if not (np.isfinite(self.G).all() and np.isfinite(self.h).all()):
            raise DimensionMismatchError("polytope data must be finite")
        self.name = name

    @property
    def dim(self) -> int:
        return self.G.shape[1]

    @property
    def is_polytope(self) -> bool:
        return True

    @property
    def is_convex(self) -> bool:
        return True

    def margin(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (self.h - x @ self.G.T).min(axis=-1)

    def halfspaces(self, dim: int) -> tuple[np.ndarray, np.ndarray]:
        if self.dim != dim:
            raise DimensionMismatchError(
                f"region '{self.name}' lives in dimension {self.dim}, expected {dim}")
        return self.G, self.h

    def __repr__(self):
        return f"HalfspacePolytope({self.name or 'unnamed'}, rows={self.G.shape[0]})"


def box(bounds: Sequence[tuple[float, float]], name: str = "") -> HalfspacePolytope:
    """Axis-aligned box from per-coordinate (lower, upper) bounds.

    Infinite bounds are dropped, so each coordinate contributes up to two
    rows (upper bound first, then lower bound).
    """
    bounds = list(bounds)
    n = len(bounds)
    rows, rhs = [], []
    for d, (lo, hi) in enumerate(bounds):
        if lo > hi:
            raise DimensionMismatchError(f"empty interval [{lo}, {hi}] in coordinate {d}")
        if np.isfinite(hi):
            e = np.zeros(n)
            e[d] = 1.0
            rows.append(e)
            rhs.append(float(hi))
        if np.isfinite(lo):
            e = np.zeros(n)
            e[d] = -1.0
            rows.append(e)
            rhs.append(float(-lo))
    if not rows:
        raise DimensionMismatchError("box needs at least one finite bound")
    return HalfspacePolytope(np.array(rows), np.array(rhs), name=name)


class NormBall:
    """Norm ball {x : ||P x - c|| <= r} where P selects ``dims`` coordinates.

    ``norm`` is "euclidean" or "infinity".  With ``complement=True`` the
    region is the closed outside of the ball instead; this keeps-out set is
    nonconvex and only usable on sampling-based paths.
    """

    def __init__(self, center, radius: float, norm: str = "euclidean",
                 dims: Sequence[int] | None = None, complement: bool = False,
                 name: str = ""):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.radius = float(radius)
        if self.radius < 0:
            raise DimensionMismatchError("ball radius must be nonnegative")
        if norm not in ("euclidean", "infinity"):
            raise DimensionMismatchError(f"unknown norm '{norm}'")
        self.norm = norm
        self.dims = None if dims is None else tuple(int(d) for d in dims)
        if self.dims is not None and len(self.dims) != self.center.shape[0]:
            raise DimensionMismatchError("dims and center disagree on length")
        self.complement = bool(complement)
        self.name = name

    @property
    def is_polytope(self) -> bool:
        return self.norm == "infinity" and not self.complement

    @property
    def is_convex(self) -> bool:
        return not self.complement

    def _distance(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = x[..., list(self.dims)] if self.dims is not None else x
        delta = y - self.center
        if self.norm == "euclidean":
            return np.sqrt((delta * delta).sum(axis=-1))
        return np.abs(delta).max(axis=-1)

    def margin(self, x: np.ndarray) -> np.ndarray:
        d = self._distance(x)
        return d - self.radius if self.complement else self.radius - d

    def halfspaces(self, dim: int) -> tuple[np.ndarray, np.ndarray]:
        if not self.is_polytope:
            raise UnsupportedStructureError(
                f"region '{self.name}' is not a polytope (norm={self.norm}, "
                f"complement={self.complement})")
        dims = self.dims if self.dims is not None else tuple(range(dim))
        if max(dims, default=-1) >= dim:
            raise DimensionMismatchError(
                f"region '{self.name}' indexes coordinate {max(dims)}, state has {dim}")
        rows, rhs = [], []
        for j, d in enumerate(dims):
            e = np.zeros(dim)
            e[d] = 1.0
            rows.append(e.copy())
            rhs.append(self.center[j] + self.radius)
            e[d] = -1.0
            rows.append(e)
            rhs.append(-(self.center[j] - self.radius))
        return np.array(rows), np.array(rhs)

    def __repr__(self):
        kind = "outside" if self.complement else "ball"
        return f"NormBall({self.name or 'unnamed'}, {self.norm} {kind}, r={self.radius})"


# ---------------------------------------------------------------------------
# formula AST and parser


@dataclass(frozen=True)
class Atom:
    region: str


@dataclass(frozen=True)
class Next:
    step: int
    region: str


@dataclass(frozen=True)
class Always:
    lo: int
    hi: int
    region: str


@dataclass(frozen=True)
class Eventually:
    lo: int
    hi: int
    region: str


Node = Atom | Next | Always | Eventually


@dataclass
class SpecFormula:
    """Parsed specification: a conjunction of temporal atoms over named
    regions, scoped to a horizon."""

    conjuncts: tuple[Node, ...]
    regions: dict[str, object]
    horizon: int
    text: str = ""


_TOKEN = re.compile(r"\s*(?:(next|always|eventually)\b|(\d+)|([A-Za-z_]\w*)|([\^\[\],()&]))")


def _tokenize(text: str):
    pos = 0
    out = []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            at = len(text) - len(stripped)
            raise SpecSyntaxError(f"unexpected character {stripped[0]!r}", at)
        kw, num, ident, sym = m.groups()
        if kw:
            out.append(("kw", kw, m.start(1)))
        elif num:
            out.append(("int", int(num), m.start(2)))
        elif ident:
            out.append(("id", ident, m.start(3)))
        elif sym:
            out.append(("sym", sym, m.start(4)))
        pos = m.end()
    out.append(("end", None, len(text)))
    return out


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind, value=None):
        tk, tv, tp = self.tokens[self.i]
        if tk != kind or (value is not None and tv != value):
            want = value if value is not None else kind
            raise SpecSyntaxError(f"expected {want!r}, found {tv!r}", tp)
        self.i += 1
        return tv, tp

    def parse(self):
        parts = [self.unit()]
        while self.peek()[:2] == ("sym", "&"):
            self.take("sym", "&")
            parts.append(self.unit())
        self.take("end")
        return tuple(parts)

    def unit(self):
        kind, value, pos = self.peek()
        if kind == "kw" and value == "next":
            self.take("kw")
            self.take("sym", "^")
            step, _ = self.take("int")
            return Next(step, self.region_ref())
        if kind == "kw":
            self.take("kw")
            self.take("sym", "[")
            lo, _ = self.take("int")
            self.take("sym", ",")
            hi, _ = self.take("int")
            self.take("sym", "]")
            region = self.region_ref()
            cls = Always if value == "always" else Eventually
            return cls(lo, hi, region)
        if kind == "id":
            self.take("id")
            return Atom(value)
        raise SpecSyntaxError(f"expected an atom or temporal operator, found {value!r}", pos)

    def region_ref(self):
        self.take("sym", "(")
        name, _ = self.take("id")
        self.take("sym", ")")
        return name


def parse(text: str, regions: dict[str, object], horizon: int) -> SpecFormula:
    """Parse specification text against a table of named regions.

    Step indices must lie in 0..horizon; interval operators need
    lo <= hi.  Unknown region names are rejected.
    """
    conjuncts = _Parser(_tokenize(text)).parse()
    for node in conjuncts:
        name = node.region
        if name not in regions:
            raise SpecSyntaxError(f"unknown region '{name}'", text.find(name))
        if isinstance(node, Next):
            if not 0 <= node.step <= horizon:
                raise SpecSyntaxError(
                    f"step {node.step} outside 0..{horizon}", text.find(name))
        elif isinstance(node, (Always, Eventually)):
            if not (0 <= node.lo <= node.hi <= horizon):
                raise SpecSyntaxError(
                    f"interval [{node.lo},{node.hi}] invalid for horizon {horizon}",
                    text.find(name))
    return SpecFormula(conjuncts=conjuncts, regions=dict(regions),
                       horizon=int(horizon), text=text)


# ---------------------------------------------------------------------------
# compiled form


class TimedSets:
    """Per-step set constraints compiled from a formula.

    The compiled form is a union of branches; each branch assigns every step
    an intersection of region atoms (possibly empty = unconstrained).  A
    trajectory satisfies the spec when some branch holds at every step.
    Formulas without ``eventually`` compile to a single branch; with
    ``eventually`` each admissible witness step spawns one branch.

    ``polytopic`` is true when there is a single branch whose atoms are all
    halfspace-representable; then ``stacked(k)`` gives the combined
    (G_k, H_k) of step k and the spec reads G_k x(k) <= H_k for every k.
    """

    def __init__(self, horizon: int, branches, dim: int):
        self.horizon = int(horizon)
        self.branches = branches
        self.dim = int(dim)
        single = len(branches) == 1
        atoms = [a for br in branches for cell in br for a in cell]
        self.polytopic = single and all(a.is_polytope for a in atoms)
        self.convex = single and all(a.is_convex for a in atoms)
        self._stacked: list[tuple[np.ndarray, np.ndarray]] | None = None
        if self.polytopic:
            stacked = []
            for cell in branches[0]:
                if cell:
                    parts = [a.halfspaces(dim) for a in cell]
                    G = np.vstack([g for g, _ in parts])
                    H = np.concatenate([h for _, h in parts])
                else:
                    G = np.zeros((0, dim))
                    H = np.zeros(0)
                stacked.append((G, H))
            self._stacked = stacked

    def stacked(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Stacked halfspace rows (G_k, H_k) of step k (polytopic only)."""
        if self._stacked is None:
            raise UnsupportedStructureError(
                "spec is not polytopic; stacked halfspaces are unavailable")
        if not 0 <= k <= self.horizon:
            raise DimensionMismatchError(f"step {k} outside 0..{self.horizon}")
        return self._stacked[k]

    def row_counts(self) -> list[int]:
        return [self.stacked(k)[0].shape[0] for k in range(self.horizon + 1)]


def _region_dim(region) -> int | None:
    if isinstance(region, HalfspacePolytope):
        return region.dim
    if isinstance(region, NormBall) and region.dims is None:
        return region.center.shape[0]
    return None


def compile(formula: SpecFormula, horizon: int | None = None) -> TimedSets:
    """Lower a formula to :class:`TimedSets`.

    The optional ``horizon`` must match the formula's own; it exists so call
    sites can assert the instance and the spec agree.
    """
    N = formula.horizon if horizon is None else int(horizon)
    if N != formula.horizon:
        raise DimensionMismatchError(
            f"formula was parsed for horizon {formula.horizon}, got {N}")
    dims = {d for r in formula.regions.values() if (d := _region_dim(r)) is not None}
    if len(dims) > 1:
        raise DimensionMismatchError(f"regions disagree on the state dimension: {sorted(dims)}")
    dim = dims.pop() if dims else 0

    base: list[list] = [[] for _ in range(N + 1)]
    eventual: list[tuple[int, int, object]] = []
    for node in formula.conjuncts:
        region = formula.regions[node.region]
        if isinstance(node, Atom):
            base[0].append(region)
        elif isinstance(node, Next):
            base[node.step].append(region)
        elif isinstance(node, Always):
            for k in range(node.lo, node.hi + 1):
                base[k].append(region)
        else:
            eventual.append((node.lo, node.hi, region))

    n_branches = 1
    for lo, hi, _ in eventual:
        n_branches *= hi - lo + 1
    if n_branches > _BRANCH_GUARD:
        raise UnsupportedStructureError(
            f"{n_branches} disjunctive branches exceed the limit of {_BRANCH_GUARD}")

    branches = []
    for picks in itertools.product(*[range(lo, hi + 1) for lo, hi, _ in eventual]):
        cells = [list(c) for c in base]
        for (lo, hi, region), k in zip(eventual, picks):
            cells[k].append(region)
        branches.append(tuple(tuple(c) for c in cells))
    return TimedSets(N, branches, dim)


def margin(traj, sets: TimedSets) -> float:
    """Signed satisfaction margin of one trajectory (>= 0 iff satisfied)."""
    states = np.asarray(getattr(traj, "states", traj), dtype=float)
    return float(margin_batch(states[None, ...], sets)[0])


def margin_batch(states: np.ndarray, sets: TimedSets) -> np.ndarray:
    """Margins of a batch of trajectories, shape (S, N+1, n) -> (S,)."""
    states = np.asarray(states, dtype=float)
    if states.ndim != 3 or states.shape[1] != sets.horizon + 1:
        raise DimensionMismatchError(
            f"state batch must have shape (S, {sets.horizon + 1}, n)")
    S = states.shape[0]
    cache: dict[tuple[int, int], np.ndarray] = {}

    def atom_margin(region, k):
        key = (id(region), k)
        if key not in cache:
            with np.errstate(invalid="ignore"):
                cache[key] = np.asarray(region.margin(states[:, k, :]), dtype=float)
        return cache[key]

    best = np.full(S, -np.inf)
    for branch in sets.branches:
        branch_margin = np.full(S, np.inf)
        for k, cell in enumerate(branch):
            for region in cell:
                branch_margin = np.minimum(branch_margin, atom_margin(region, k))
        best = np.maximum(best, branch_margin)
    # non-finite states never satisfy a constrained spec
    bad = ~np.isfinite(states).all(axis=(1, 2))
    if bad.any() and any(any(cell for cell in br) for br in sets.branches):
        best = np.where(bad, -np.inf, best)
    return best


def satisfied(traj, sets: TimedSets) -> bool:
    return margin(traj, sets) >= 0.0
