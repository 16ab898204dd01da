from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SCENARIOS, scenario_path
from wcstab.exprdsl import (BinOp, Call, Const, Dual, EvalError, ExprSyntaxError, Neg, Var,
                            directional_derivative, evaluate_vector, jacobian, parse_expr,
                            to_source)
from wcstab.geometry import MetricField
from wcstab.scenario import load_scenario


@pytest.mark.parametrize("src, n, m, x, u, expected", [
    ("x1 + 2*u1", 2, 1, [3, 0], [1], 5.0),
    ("-x2^2", 2, 0, [0, 3], [], -9.0),
    ("sin(x1)", 1, 0, [0.0], [], 0.0),
    ("exp(x1)*u1", 1, 1, [1.0], [2.0], 2.0 * math.e),
    ("2^3^2", 1, 0, [0.0], [], 64.0),
    ("1 - 2 - 3", 1, 0, [0.0], [], -4.0),
    ("8 / 4 / 2", 1, 0, [0.0], [], 1.0),
    ("(x1 + 1) * 3", 1, 0, [1.0], [], 6.0),
    ("-2^2", 1, 0, [0.0], [], -4.0),
    ("tanh(0) + cos(0) + sqrt(4)", 1, 0, [0.0], [], 3.0),
    ("1.5e1 + .5", 1, 0, [0.0], [], 15.5),
])
def test_eval_examples(src, n, m, x, u, expected):
    assert parse_expr(src, n, m).eval(x, u) == pytest.approx(expected, rel=1e-15, abs=0)


@pytest.mark.parametrize("src, n, m", [
    ("x3", 2, 1),
    ("u2", 2, 1),
    ("x0", 2, 0),
    ("abs(x1)", 1, 0),
    ("foo", 1, 0),
    ("x1 +", 1, 0),
    ("(x1", 1, 0),
    ("x1)", 1, 0),
    ("", 1, 0),
    ("x1 $ 2", 1, 0),
])
def test_parse_errors(src, n, m):
    with pytest.raises(ExprSyntaxError):
        parse_expr(src, n, m)


def test_syntax_error_reports_byte_offset():
    with pytest.raises(ExprSyntaxError) as exc:
        parse_expr("x1 + $", 1, 0)
    assert exc.value.offset == 5


@pytest.mark.parametrize("src, x, bad", [
    ("sqrt(x1)", [-1.0], "sqrt(x1)"),
    ("1/x1", [0.0], "1/x1"),
    ("exp(x1)", [1000.0], None),
])
def test_domain_errors(src, x, bad):
    with pytest.raises(EvalError) as exc:
        parse_expr(src, 1, 0).eval(x)
    if bad is not None:
        assert exc.value.subexpr == bad


def test_sqrt_not_differentiable_at_zero():
    e = parse_expr("sqrt(x1)", 1, 0)
    assert e.eval([0.0]) == 0.0
    with pytest.raises(EvalError, match="non-differentiable"):
        jacobian([e], [0.0])


def test_nan_is_reported():
    with pytest.raises(EvalError, match="NaN"):
        parse_expr("x1 * 0", 1, 0).eval([math.inf])


def test_eval_is_deterministic():
    e = parse_expr("sin(x1)*exp(x2) - x1^3/(1 + x2^2)", 2, 0)
    a = [e.eval([0.3, -1.7]) for _ in range(5)]
    assert all(v == a[0] for v in a)


def test_batched_evaluation_matches_pointwise(rng):
    exprs = [parse_expr(s, 2, 1) for s in ("x2 + 0.5*x2*u1", "-x1 + (1 - 0.5*x1)*u1")]
    X = rng.normal(size=(2, 7))
    U = rng.normal(size=(1, 7))
    batch = evaluate_vector(exprs, X, U)
    for b in range(7):
        assert np.array_equal(batch[:, b], evaluate_vector(exprs, X[:, b], U[:, b]))


@pytest.mark.parametrize("exprs, x, expected", [
    (("x2", "-x1"), [0.4, -2.0], [[0, 1], [-1, 0]]),
    (("sin(x1)",), [0.0], [[1.0]]),
])
def test_jacobian_examples(exprs, x, expected):
    n = len(x)
    J = jacobian([parse_expr(s, n, 0) for s in exprs], x)
    assert np.array_equal(J, np.array(expected, dtype=float))


def test_control_jacobian():
    exprs = [parse_expr(s, 2, 2) for s in ("x1*u1 + u2^2", "sin(u1)")]
    J = jacobian(exprs, [2.0, 0.0], [0.0, 3.0], wrt="control")
    assert np.allclose(J, [[2.0, 6.0], [1.0, 0.0]], rtol=0, atol=1e-15)


def test_dual_arithmetic_rules():
    a = Dual(2.0, 1.0)
    assert (a * a).der == 4.0
    assert (1.0 / a).der == -0.25
    assert (3.0 - a).der == -1.0


def _fd_jacobian(exprs, x, u, wrt, h=1e-6):
    base = np.array(x if wrt == "state" else u, dtype=float)
    cols = []
    for j in range(len(base)):
        e = np.zeros_like(base)
        e[j] = h
        if wrt == "state":
            fp, fm = evaluate_vector(exprs, base + e, u), evaluate_vector(exprs, base - e, u)
        else:
            fp, fm = evaluate_vector(exprs, x, base + e), evaluate_vector(exprs, x, base - e)
        cols.append((fp - fm) / (2 * h))
    return np.stack(cols, axis=1)


@pytest.mark.parametrize("name", SCENARIOS)
def test_ad_matches_finite_differences(name, rng):
    sc = load_scenario(scenario_path(name))
    sys_ = sc.system
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(-2, 2, sys_.n)
        u = rng.uniform(-1, 1, sys_.m)
        for wrt in ("state", "control") if sys_.m else ("state",):
            ad = jacobian(sys_.f_exprs, x, u, wrt)
            fd = _fd_jacobian(sys_.f_exprs, x, u, wrt)
            worst = max(worst, np.abs(ad - fd).max() / max(1.0, np.abs(ad).max()))
    assert worst <= 1e-6


def test_directional_derivative_of_vector():
    exprs = [parse_expr("x1^2*x2", 2, 0)]
    d = directional_derivative(exprs, [1.0, 2.0], [1.0, 1.0])
    assert d[0] == pytest.approx(2 * 1 * 2 + 1.0, abs=1e-15)


def test_metric_directional_derivative_examples(rng):
    G = MetricField.from_strings([["1 + 4*x1^2", "2*x1"], ["2*x1", "1"]])
    assert np.array_equal(G.directional_derivative([0.0, 0.0], [1.0, 0.0]),
                          [[0.0, 2.0], [2.0, 0.0]])
    C = MetricField.from_matrix([[2.0, 0.5], [0.5, 1.0]])
    assert not np.any(C.directional_derivative([0.3, 0.1], [1.0, -4.0]))
    h = 1e-6
    for _ in range(20):
        x, v = rng.normal(size=2), rng.normal(size=2)
        ad = G.directional_derivative(x, v)
        assert np.array_equal(ad, ad.T)
        fd = (G.matrix(x + h * v) - G.matrix(x - h * v)) / (2 * h)
        assert np.abs(ad - fd).max() <= 1e-6 * max(1.0, np.abs(ad).max())


# -- parse / print round trip ------------------------------------------------

_leaf = st.one_of(
    st.floats(min_value=0, max_value=1e6, allow_nan=False, allow_infinity=False).map(Const),
    st.integers(1, 3).map(lambda i: Var("x", i)),
    st.integers(1, 2).map(lambda j: Var("u", j)),
)


def _extend(children):
    return st.one_of(
        children.map(Neg),
        st.tuples(st.sampled_from("+-*/^"), children, children).map(lambda t: BinOp(*t)),
        st.tuples(st.sampled_from(["sin", "cos", "tanh", "exp", "sqrt"]), children)
        .map(lambda t: Call(*t)),
    )


@settings(max_examples=300, deadline=None)
@given(st.recursive(_leaf, _extend, max_leaves=12))
def test_print_parse_round_trip(tree):
    src = to_source(tree)
    assert parse_expr(src, 3, 2) == tree
    assert parse_expr(str(parse_expr(src, 3, 2)), 3, 2) == tree


@pytest.mark.parametrize("src", ["-x2^2", "(-x2)^2", "2^3^2", "2^(3^2)", "x1 - (x2 - u1)",
                                 "x1/(x2*u1)", "-(x1 + x2)", "sin(-x1)^2"])
def test_round_trip_preserves_structure(src):
    tree = parse_expr(src, 2, 1)
    assert parse_expr(to_source(tree), 2, 1) == tree
