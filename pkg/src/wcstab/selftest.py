"""Small oracle suite behind ``wcstab selftest``: each check compares a library
result against a closed form computed independently."""
from __future__ import annotations

import math

import numpy as np

from .contraction import certify_weak_contraction, metric_lie_derivative
from .exprdsl import jacobian, parse_expr
from .geometry import MetricField, pullback_from_jacobian
from .sim import integrate
from .stabilizer import (ClosedLoopSystem, LinearFeedback, LyapunovCertificate, local_lqr,
                         solve_lyapunov)
from .system import SystemSpec


def _check_dsl():
    e = parse_expr("x1 + 2*u1", 2, 1)
    got = e.eval([3.0, 0.0], [1.0])
    return got == 5.0, f"eval={got!r}"


def _check_jacobian():
    J = jacobian([parse_expr("sin(x1)", 1, 0)], [0.0], [])
    return J[0, 0] == 1.0, f"d sin(x1)/dx1 at 0 = {float(J[0, 0])!r}"


def _pullback():
    # G = Dphi^T Dphi for phi(x) = (x1, x2 + x1^2)
    return pullback_from_jacobian([["1", "0"], ["2*x1", "1"]])


def _check_pullback_log():
    res = _pullback().log_map(np.zeros(2), np.ones(2))
    err = max(np.abs(res.v - [1.0, 2.0]).max(), abs(res.distance - math.sqrt(5.0)))
    return err <= 1e-6, f"max error {err:.2e}"


def _check_pullback_exp():
    x = _pullback().exp_map(np.zeros(2), np.array([1.0, 2.0]))
    err = float(np.abs(x - 1.0).max())
    return err <= 1e-8, f"max error {err:.2e}"


def _check_christoffel():
    gam = _pullback().christoffel(np.zeros(2))
    ref = np.zeros((2, 2, 2))
    ref[1, 0, 0] = 2.0
    err = float(np.abs(gam - ref).max())
    return err <= 1e-12, f"max error {err:.2e}"


def _check_lyapunov():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((4, 4)) - 4.0 * np.eye(4)
    P = solve_lyapunov(A, np.eye(4))
    res = float(np.abs(A.T @ P + P @ A + np.eye(4)).max())
    return res <= 1e-10, f"residual {res:.2e}"


def _check_lqr():
    K, P = local_lqr(np.zeros((1, 1)), np.ones((1, 1)))
    err = max(abs(K[0, 0] - 1.0), abs(P[0, 0] - 1.0))
    return err <= 1e-10, f"K={float(K[0, 0])!r}"


def _check_alpha():
    sys_ = SystemSpec.from_strings(["x2", "-x1 + u1"], m=1)
    cert = LyapunovCertificate(np.eye(2), 1.0, math.inf)
    cl = ClosedLoopSystem(sys_, MetricField.identity(2), LinearFeedback(np.zeros((1, 2))), cert)
    x, xh = np.array([1.0, 0.0]), np.zeros(2)
    a = cl.alpha(x, xh)
    k = cl.correction_k(x, xh)
    err = max(abs(a - 1.0 / 6.0), float(np.abs(k - [1.0 / 3.0, 0.0]).max()))
    return err <= 1e-12, f"alpha={a!r}"


def _check_contraction_negative():
    sys_ = SystemSpec.from_strings(["x1"], m=0)
    rep = certify_weak_contraction(sys_, MetricField.identity(1), (-1.0, 1.0), ([], []), 64, 0)
    return (not rep.passed) and abs(rep.max_eig - 2.0) <= 1e-12, f"max eig {rep.max_eig!r}"


def _check_lie_derivative():
    sys_ = SystemSpec.from_strings(["x2", "-x1 + u1"], m=1)
    M = metric_lie_derivative(sys_, MetricField.identity(2), [0.3, -0.7], [0.5])
    return bool(np.all(M == 0.0)), f"max |M| {np.abs(M).max():.1e}"


def _check_rk4():
    tr = integrate(lambda t, x: -x, np.array([1.0]), 1.0, 1e-3)
    err = abs(tr.states[-1, 0] - math.exp(-1.0))
    return err <= 1e-8, f"error {err:.2e}"


CHECKS = (
    ("dsl_eval", _check_dsl),
    ("dsl_jacobian", _check_jacobian),
    ("pullback_log", _check_pullback_log),
    ("pullback_exp", _check_pullback_exp),
    ("christoffel", _check_christoffel),
    ("lyapunov_residual", _check_lyapunov),
    ("scalar_lqr", _check_lqr),
    ("alpha_and_k", _check_alpha),
    ("lie_derivative_skew", _check_lie_derivative),
    ("contraction_negative_control", _check_contraction_negative),
    ("rk4_decay", _check_rk4),
)


def run_selftest():
    """Returns a list of (name, passed, detail)."""
    out = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # report, never crash the suite
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
