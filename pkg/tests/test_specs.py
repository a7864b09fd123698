"""Spec language: regions, parser, compiler, margins.

The randomized block checks the compiled per-step representation against a
direct interpreter of the formula semantics: each conjunct is scored on
the trajectory on its own (next -> one step, always -> min over the
window, eventually -> max over the window) and the formula margin is the
min across conjuncts.  Branch expansion in the compiler must agree.
"""

import numpy as np
import pytest

from resilopt.errors import (
    DimensionMismatchError,
    SpecSyntaxError,
    UnsupportedStructureError,
)
from resilopt import specs
from resilopt.specs import (
    Always,
    Atom,
    Eventually,
    HalfspacePolytope,
    Next,
    NormBall,
    box,
    compile as compile_spec,
    margin,
    margin_batch,
    parse,
    satisfied,
)


# ---------------------------------------------------------------------------
# regions


def test_box_margin_is_smallest_side_slack():
    b = box([(-1.0, 1.0), (0.0, 4.0)])
    assert np.isclose(b.margin(np.array([0.0, 2.0])), 1.0)
    assert np.isclose(b.margin(np.array([0.9, 2.0])), 0.1)
    assert b.margin(np.array([1.5, 2.0])) < 0


def test_box_drops_infinite_sides():
    b = box([(-np.inf, np.inf), (10.0, 20.0)])
    assert b.G.shape == (2, 2)
    # remaining rows only see coordinate 1
    assert np.all(b.G[:, 0] == 0.0)
    assert np.isclose(b.margin(np.array([1e9, 15.0])), 5.0)


def test_euclidean_ball_margin():
    ball = NormBall([1.0, 1.0], 2.0)
    assert np.isclose(ball.margin(np.array([1.0, 1.0])), 2.0)
    assert np.isclose(ball.margin(np.array([4.0, 1.0])), -1.0)
    assert not ball.is_polytope and ball.is_convex


def test_complement_ball_flips_sign_and_convexity():
    keep_out = NormBall([0.0, 0.0], 4.0, dims=(0, 1), complement=True)
    x = np.array([3.0, 0.0, 99.0])     # third coordinate is ignored
    assert np.isclose(keep_out.margin(x), -1.0)
    assert np.isclose(keep_out.margin(np.array([5.0, 0.0, 0.0])), 1.0)
    assert not keep_out.is_convex and not keep_out.is_polytope


def test_infinity_ball_is_a_polytope():
    ball = NormBall([1.0], 0.5, norm="infinity", dims=(1,))
    G, h = ball.halfspaces(3)
    assert G.shape == (2, 3)
    x = np.array([0.0, 1.2, 0.0])
    assert np.isclose((h - G @ x).min(), ball.margin(x))


def test_ball_halfspaces_guard():
    with pytest.raises(UnsupportedStructureError):
        NormBall([0.0], 1.0).halfspaces(1)
    with pytest.raises(DimensionMismatchError):
        NormBall([0.0], 1.0, norm="infinity", dims=(4,)).halfspaces(2)


# ---------------------------------------------------------------------------
# parser


R2 = {"A": box([(-1, 1), (-1, 1)]), "B": box([(0, 2), (0, 2)])}


def test_parse_builds_the_expected_ast():
    f = parse("next^2(A) & always[4,6] (B) & eventually[0,3](A) & A", R2, 6)
    assert f.conjuncts == (Next(2, "A"), Always(4, 6, "B"),
                           Eventually(0, 3, "A"), Atom("A"))
    assert f.horizon == 6


@pytest.mark.parametrize("text", [
    "next^9(A)",              # step beyond horizon
    "always[5,2](A)",         # empty interval
    "always[0,7](A)",         # interval beyond horizon
    "sometimes[0,2](A)",      # unknown operator
    "next^2(C)",              # unknown region
    "next^2(A) &",            # dangling conjunction
    "next^-1(A)",             # negative literal is not in the grammar
    "always[0,2] A",          # missing parentheses
])
def test_parse_rejects_malformed_text(text):
    with pytest.raises(SpecSyntaxError):
        parse(text, R2, 6)


def test_syntax_error_carries_position():
    err = pytest.raises(SpecSyntaxError, parse, "next^2(C)", R2, 6).value
    assert "C" in str(err)


# ---------------------------------------------------------------------------
# compiler


def test_compile_checks_the_horizon():
    f = parse("always[0,3](A)", R2, 3)
    with pytest.raises(DimensionMismatchError):
        compile_spec(f, horizon=5)


def test_polytopic_single_branch_stacks_rows():
    f = parse("next^2(A) & always[1,3](B)", R2, 3)
    sets = compile_spec(f)
    assert sets.polytopic and sets.convex
    assert sets.row_counts() == [0, 4, 8, 4]
    G, H = sets.stacked(2)
    assert G.shape == (8, 2) and H.shape == (8,)


def test_eventually_compiles_to_branches():
    f = parse("eventually[0,2](A) & eventually[1,3](B)", R2, 3)
    sets = compile_spec(f)
    assert len(sets.branches) == 9
    assert not sets.polytopic
    with pytest.raises(UnsupportedStructureError):
        sets.stacked(0)


def test_branch_guard_trips():
    regions = {"A": R2["A"]}
    text = " & ".join(["eventually[0,30](A)"] * 4)
    f = parse(text, regions, 30)
    with pytest.raises(UnsupportedStructureError):
        compile_spec(f)


def test_mixed_region_dims_rejected():
    regions = {"A": box([(-1, 1)]), "B": box([(-1, 1), (0, 1)])}
    f = parse("A & B", regions, 2)
    with pytest.raises(DimensionMismatchError):
        compile_spec(f)


# ---------------------------------------------------------------------------
# margins


def test_margin_of_nonfinite_trajectory_is_minus_inf():
    f = parse("always[0,2](A)", R2, 2)
    sets = compile_spec(f)
    states = np.zeros((1, 3, 2))
    states[0, 2, 0] = np.nan
    assert margin_batch(states, sets)[0] == -np.inf


def test_margin_batch_shape_guard():
    sets = compile_spec(parse("A", R2, 2))
    with pytest.raises(DimensionMismatchError):
        margin_batch(np.zeros((4, 2, 2)), sets)


def _interpret(f: specs.SpecFormula, states: np.ndarray) -> float:
    """Direct semantics, one conjunct at a time."""
    def region_margin(name, k):
        return float(f.regions[name].margin(states[k]))

    total = np.inf
    for node in f.conjuncts:
        if isinstance(node, Atom):
            val = region_margin(node.region, 0)
        elif isinstance(node, Next):
            val = region_margin(node.region, node.step)
        elif isinstance(node, Always):
            val = min(region_margin(node.region, k)
                      for k in range(node.lo, node.hi + 1))
        else:
            val = max(region_margin(node.region, k)
                      for k in range(node.lo, node.hi + 1))
        total = min(total, val)
    return total


def test_compiled_margins_match_direct_interpretation():
    rng = np.random.default_rng(7)
    regions = {
        "P": box([(-1.0, 1.0), (-1.0, 1.0)]),
        "Q": box([(0.0, 2.0), (-0.5, 0.5)]),
        "S": NormBall([0.0, 0.0], 1.5),
        "K": NormBall([0.5, 0.5], 0.75, complement=True),
        "I": NormBall([0.0], 1.0, norm="infinity", dims=(1,)),
    }
    names = list(regions)
    for trial in range(200):
        N = int(rng.integers(1, 7))
        parts = []
        for _ in range(int(rng.integers(1, 4))):
            name = names[rng.integers(len(names))]
            op = rng.integers(4)
            if op == 0:
                parts.append(name)
            elif op == 1:
                parts.append(f"next^{rng.integers(N + 1)}({name})")
            else:
                lo = int(rng.integers(N + 1))
                hi = int(rng.integers(lo, N + 1))
                word = "always" if op == 2 else "eventually"
                parts.append(f"{word}[{lo},{hi}]({name})")
        f = parse(" & ".join(parts), regions, N)
        sets = compile_spec(f)
        states = rng.normal(scale=1.2, size=(N + 1, 2))
        got = margin(states, sets)
        want = _interpret(f, states)
        assert np.isclose(got, want, atol=1e-12), (parts, N)
        assert satisfied(states, sets) == (want >= 0.0)


def test_margin_batch_vectorizes_the_scalar_margin():
    regions = {"P": box([(-1.0, 1.0), (-1.0, 1.0)]),
               "S": NormBall([0.0, 0.0], 1.5)}
    f = parse("always[0,4](P) & eventually[2,4](S)", regions, 4)
    sets = compile_spec(f)
    rng = np.random.default_rng(1)
    states = rng.normal(size=(32, 5, 2))
    batch = margin_batch(states, sets)
    for s in range(32):
        assert np.isclose(batch[s], margin(states[s], sets))
