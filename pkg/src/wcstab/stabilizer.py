"""Local stabilizers, quadratic Lyapunov certificates and the dynamic feedback.

The dynamic feedback runs a copy ``xh`` of the plant driven by the local
feedback ``lam(xh)`` and pulls it towards the true state with the correction

    k(x, xh) = -alpha(x, xh) * grad_{g(xh)} d_g^2(x, xh)

where alpha is small enough that ``xh`` never leaves the region on which the
local feedback is certified.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import qmc

from .exprdsl import Node, evaluate_vector, jacobian, parse_expr
from .geometry import MetricField
from .linalg import jacobi_eigh
from .system import SystemSpec, batch_jacobian

HURWITZ_MARGIN = 1e-10
DECAY_SLACK = 1e-9
LEVEL_EXPONENTS = np.arange(-40.0, 40.25, 0.25)  # log2 of candidate levels


class StabilizerError(RuntimeError):
    pass


def is_hurwitz(A) -> bool:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return bool(np.all(np.linalg.eigvals(A).real < -HURWITZ_MARGIN))


def _lyap_solve(A, Q):
    n = A.shape[0]
    eye = np.eye(n)
    M = np.kron(A.T, eye) + np.kron(eye, A.T)
    try:
        P = np.linalg.solve(M, -Q.reshape(-1)).reshape(n, n)
        # one step of iterative refinement
        R = A.T @ P + P @ A + Q
        P = P + np.linalg.solve(M, -R.reshape(-1)).reshape(n, n)
    except np.linalg.LinAlgError as exc:
        raise StabilizerError("singular Lyapunov system") from exc
    return 0.5 * (P + P.T)


def solve_lyapunov(A_cl, Q) -> np.ndarray:
    """P solving A_cl^T P + P A_cl = -Q for Hurwitz A_cl."""
    A = np.atleast_2d(np.asarray(A_cl, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if A.shape[0] != A.shape[1] or Q.shape != A.shape:
        raise ValueError("A_cl and Q must be square of the same size")
    if not np.allclose(Q, Q.T, rtol=0, atol=1e-14):
        raise ValueError("Q must be symmetric")
    if not is_hurwitz(A):
        raise StabilizerError(f"matrix is not Hurwitz (eigenvalues {np.linalg.eigvals(A)})")
    return _lyap_solve(A, Q)


def _pole_shift_gain(A, B):
    # Bass: with beta > spectral abscissa, Z solving (A+bI)Z + Z(A+bI)^T = 2BB^T
    # is positive definite for controllable (A,B) and K = B^T Z^{-1} stabilizes.
    n = A.shape[0]
    beta = 1.0 + np.abs(A).sum(axis=1).max()
    Ash = -(A + beta * np.eye(n)).T
    Z = _lyap_solve(Ash, 2.0 * B @ B.T)
    try:
        return B.T @ np.linalg.inv(Z)
    except np.linalg.LinAlgError as exc:
        raise StabilizerError("(A, B) not controllable: pole-shift seed failed") from exc


def local_lqr(A, B, q: float = 1.0, r: float = 1.0, tol: float = 1e-12, max_iter: int = 100):
    """LQR gain by Newton-Kleinman iteration; returns ``(K, P)``.

    Cost weights are ``Q = q I`` and ``R = r I``; ``A - B K`` is Hurwitz.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    m = B.shape[1]
    Q = q * np.eye(n)
    R = r * np.eye(m)
    if is_hurwitz(A):
        K = np.zeros((m, n))
    elif m == 0 or not B.any():
        raise StabilizerError("A is not Hurwitz and there is no input")
    else:
        K = _pole_shift_gain(A, B)
        if not is_hurwitz(A - B @ K):
            raise StabilizerError("could not find a stabilizing seed gain")
    if m == 0 or not B.any():
        return K, solve_lyapunov(A, Q)
    Rinv = np.linalg.inv(R)
    for _ in range(max_iter):
        P = solve_lyapunov(A - B @ K, Q + K.T @ R @ K)
        K_new = Rinv @ B.T @ P
        done = np.abs(K_new - K).max() <= tol * (1.0 + np.abs(K).max())
        K = K_new
        if done:
            break
    else:
        raise StabilizerError("Newton-Kleinman iteration did not converge")
    P = solve_lyapunov(A - B @ K, Q + K.T @ R @ K)
    return K, P


# ---------------------------------------------------------------------------
# Local feedback laws


class LinearFeedback:
    """lam(x) = -K x."""

    def __init__(self, K):
        self.K = np.atleast_2d(np.asarray(K, dtype=float))

    def __call__(self, x) -> np.ndarray:
        return -self.K @ np.asarray(x, dtype=float)

    def jacobian(self, x=None) -> np.ndarray:
        return -self.K

    def batch_jacobian(self, x) -> np.ndarray:
        return np.broadcast_to(-self.K, (np.shape(x)[1],) + self.K.shape)

    def describe(self) -> str:
        return "linear gain K=" + _fmt_matrix(self.K)


class ExprFeedback:
    """lam(x) given by m expressions in x1..xn."""

    def __init__(self, exprs: Sequence[Node], n: int):
        self.exprs = tuple(exprs)
        self.n = n

    @classmethod
    def from_strings(cls, srcs: Sequence[str], n: int) -> "ExprFeedback":
        return cls([parse_expr(s, n, 0) for s in srcs], n)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = evaluate_vector(self.exprs, x)
        if x.ndim == 2 and out.ndim == 1:
            out = np.repeat(out[:, None], x.shape[1], axis=1)
        return out

    def jacobian(self, x=None) -> np.ndarray:
        x = np.zeros(self.n) if x is None else x
        return jacobian(self.exprs, x, (), "state")

    def batch_jacobian(self, x) -> np.ndarray:
        return batch_jacobian(self.exprs, x, np.zeros((0, np.shape(x)[1])), "state")

    def describe(self) -> str:
        return "expressions " + "; ".join(str(e) for e in self.exprs)


def _fmt_matrix(M) -> str:
    M = np.atleast_2d(M)
    return "[" + "; ".join(",".join(repr(float(v)) for v in row) for row in M) + "]"


def _check_feedback(sys: SystemSpec, lam):
    u0 = np.atleast_1d(lam(np.zeros(sys.n)))
    if u0.shape != (sys.m,):
        raise StabilizerError(f"feedback returns {u0.shape[0]} controls, system has m={sys.m}")
    if np.abs(u0).max(initial=0.0) > 1e-12:
        raise StabilizerError(f"feedback does not vanish at the origin: lam(0)={u0.tolist()}")


def linearization(sys: SystemSpec, lam) -> np.ndarray:
    """Jacobian at 0 of x -> f(x, lam(x))."""
    z = np.zeros(sys.n)
    u0 = np.zeros(sys.m)
    return sys.jac_x(z, u0) + sys.jac_u(z, u0) @ lam.jacobian(z).reshape(sys.m, sys.n)


# ---------------------------------------------------------------------------
# Certificates


@dataclass
class LyapunovCertificate:
    """V(x) = x^T P x with V' <= -c V on D(r_star) = {V <= r_star}."""

    P: np.ndarray
    c: float
    r_star: float
    Q: np.ndarray = None
    K: np.ndarray | None = None
    r_fail: float | None = None
    linear: bool = False

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if not np.array_equal(self.P, self.P.T):
            raise StabilizerError("P must be symmetric")
        if jacobi_eigh(self.P)[0][0] <= 1e-10:
            raise StabilizerError("P must be positive definite")
        if not self.c > 0:
            raise StabilizerError("decay rate c must be positive")

    def V(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return float(x @ self.P @ x)
        return np.einsum("ib,ij,jb->b", x, self.P, x)

    def dV(self, x) -> np.ndarray:
        """Euclidean gradient (dV/dx)^T = 2 P x."""
        return 2.0 * self.P @ np.asarray(x, dtype=float)

    def contains(self, x) -> bool:
        return self.V(x) <= self.r_star

    def summary(self) -> dict:
        return {
            "CERT_P": _fmt_matrix(self.P),
            "CERT_C": repr(float(self.c)),
            "CERT_RSTAR": "inf" if np.isinf(self.r_star) else repr(float(self.r_star)),
            "CERT_RFAIL": "none" if self.r_fail is None else repr(float(self.r_fail)),
            "CERT_K": "none" if self.K is None else _fmt_matrix(self.K),
            "CERT_LINEAR": str(self.linear).lower(),
        }


def _closed_loop_jacobians(sys, lam, X) -> np.ndarray:
    U = lam(X)
    Jx = batch_jacobian(sys.f_exprs, X, U, "state")
    Ju = batch_jacobian(sys.f_exprs, X, U, "control")
    return Jx + Ju @ lam.batch_jacobian(X)


def build_certificate(sys: SystemSpec, lam, Q=None, box=(-1.0, 1.0), samples: int = 2000,
                      seed: int = 0) -> LyapunovCertificate:
    """Quadratic certificate for x' = f(x, lam(x)).

    P solves the Lyapunov equation of the linearization; c = min eig(Q) / max
    eig(P); r_star is the largest level on the grid 2^(-40..40, step 1/4)
    where the sampled decay check holds (infinite when the closed loop is
    linear).
    """
    _check_feedback(sys, lam)
    n = sys.n
    Q = np.eye(n) if Q is None else np.atleast_2d(np.asarray(Q, dtype=float))
    A_cl = linearization(sys, lam)
    if not is_hurwitz(A_cl):
        raise StabilizerError(
            f"linearization of the closed loop is not Hurwitz (eigenvalues {np.linalg.eigvals(A_cl)})")
    P = solve_lyapunov(A_cl, Q)
    c = jacobi_eigh(Q)[0][0] / jacobi_eigh(P)[0][-1]
    K = lam.K if isinstance(lam, LinearFeedback) else None

    lo = np.broadcast_to(np.asarray(box[0], float), (n,))
    hi = np.broadcast_to(np.asarray(box[1], float), (n,))
    pts = qmc.Halton(d=n, scramble=True, seed=seed).random(max(samples, 1))
    X = (lo + pts * (hi - lo)).T
    X = np.hstack([X, 100.0 * X])
    J = _closed_loop_jacobians(sys, lam, X)
    scale = 1.0 + np.abs(A_cl).max()
    if np.abs(J - A_cl).max() <= 1e-10 * scale:
        return LyapunovCertificate(P, c, np.inf, Q, K, None, linear=True)

    # unit-ball cloud mapped so that V(Y) = |z|^2
    Z = 2.0 * pts - 1.0
    norms = np.linalg.norm(Z, axis=1)
    Z = Z[(norms > 0) & (norms <= 1.0)]
    shell = Z / np.linalg.norm(Z, axis=1, keepdims=True)
    Z = np.vstack([Z, shell])
    L = np.linalg.cholesky(P)
    Y = np.linalg.solve(L.T, Z.T)

    def decays(r: float) -> bool:
        Xr = np.sqrt(r) * Y
        F = sys.f(Xr, lam(Xr))
        Vdot = 2.0 * np.einsum("ib,ij,jb->b", Xr, P, F)
        V = np.einsum("ib,ij,jb->b", Xr, P, Xr)
        return bool(np.all(Vdot <= -c * V + DECAY_SLACK))

    grid = 2.0 ** LEVEL_EXPONENTS
    if not decays(grid[0]):
        raise StabilizerError("no certified level: decay check fails on the smallest level")
    if decays(grid[-1]):
        return LyapunovCertificate(P, c, float(grid[-1]), Q, K, None)
    lo_i, hi_i = 0, len(grid) - 1
    while hi_i - lo_i > 1:
        mid = (lo_i + hi_i) // 2
        if decays(grid[mid]):
            lo_i = mid
        else:
            hi_i = mid
    return LyapunovCertificate(P, c, float(grid[lo_i]), Q, K, float(grid[hi_i]))


# ---------------------------------------------------------------------------
# Dynamic feedback


@dataclass
class ClosedLoopSystem:
    """Plant x' = f(x, lam(xh)) with internal model xh' = f(xh, lam(xh)) + k(x, xh)."""

    system: SystemSpec
    metric: MetricField
    feedback: object
    certificate: LyapunovCertificate
    alpha_floor: float = 0.0
    threshold: float = 1.0
    _n: int = field(init=False, repr=False)

    def __post_init__(self):
        _check_feedback(self.system, self.feedback)
        if self.metric.n != self.system.n:
            raise StabilizerError("metric and system dimensions differ")
        if self.alpha_floor < 0:
            raise StabilizerError("alpha floor must be non-negative")
        self._n = self.system.n

    @property
    def dim(self) -> int:
        return 2 * self._n

    def _grad(self, x, xh):
        if np.ndim(x) == 1:
            return self.metric.grad_d2(x, xh)
        return self.metric.grad_d2_batch(x, xh)

    def _alpha_from_grad(self, xh, grad):
        cert = self.certificate
        V = cert.V(xh)
        dVn = np.linalg.norm(cert.dV(xh), axis=0)
        gn = np.linalg.norm(grad, axis=0)
        a = cert.c * np.maximum(V, self.threshold) / (2.0 * (1.0 + dVn) * (1.0 + gn))
        return np.maximum(a, self.alpha_floor)

    def alpha(self, x, xh):
        """Positive gain c*max(V(xh),1) / (2 (1+|dV(xh)|)(1+|grad d^2|))."""
        x = np.asarray(x, dtype=float)
        xh = np.asarray(xh, dtype=float)
        a = self._alpha_from_grad(xh, self._grad(x, xh))
        return float(a) if np.ndim(a) == 0 else a

    def correction_k(self, x, xh) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        xh = np.asarray(xh, dtype=float)
        grad = self._grad(x, xh)
        return -self._alpha_from_grad(xh, grad) * grad

    def k_bound(self, xh):
        """c*max(V(xh),1) / (2 (1+|dV(xh)|)), the a-priori bound on |k|."""
        cert = self.certificate
        xh = np.asarray(xh, dtype=float)
        return cert.c * np.maximum(cert.V(xh), self.threshold) / (
            2.0 * (1.0 + np.linalg.norm(cert.dV(xh), axis=0)))

    def field(self, x, xh) -> np.ndarray:
        """(f(x, lam(xh)), f(xh, lam(xh)) + k(x, xh)), stacked."""
        x = np.asarray(x, dtype=float)
        xh = np.asarray(xh, dtype=float)
        u = self.feedback(xh)
        k = self.correction_k(x, xh)
        f = self.system.f
        return np.concatenate([f(x, u), f(xh, u) + k])

    def __call__(self, t, y) -> np.ndarray:
        n = self._n
        return self.field(y[:n], y[n:])

    def derived(self, x, xh) -> dict:
        """Monitored quantities at batched points (columns)."""
        x = np.atleast_2d(np.asarray(x, dtype=float).T).T
        xh = np.atleast_2d(np.asarray(xh, dtype=float).T).T
        v, d2 = self.metric.log_batch(xh, x)
        grad = -2.0 * v
        a = self._alpha_from_grad(xh, grad)
        gsq = 4.0 * d2
        return {
            "V": self.certificate.V(xh),
            "d2": d2,
            "alpha": a,
            "knorm": a * np.linalg.norm(grad, axis=0),
            "dissipation": a * gsq,
            "xnorm": np.linalg.norm(x, axis=0),
            "xhnorm": np.linalg.norm(xh, axis=0),
        }


# ---------------------------------------------------------------------------
# Jurdjevic-Quinn damping


class JQFeedback:
    """u(x) = -gamma * (L_b V)(x)^T with V = d_g(x, 0)^2 and b = df/du(., 0)."""

    def __init__(self, sys: SystemSpec, metric: MetricField, gamma: float):
        if not gamma > 0:
            raise StabilizerError("damping gain gamma must be positive")
        if metric.n != sys.n:
            raise StabilizerError("metric and system dimensions differ")
        self.system = sys
        self.metric = metric
        self.gamma = float(gamma)

    def V(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return float(self.metric.d2_batch(x[:, None], np.zeros((self.system.n, 1)))[0])
        return self.metric.d2_batch(x, np.zeros_like(x))

    def dV(self, x) -> np.ndarray:
        """Euclidean gradient of x -> d_g(x, 0)^2."""
        x = np.asarray(x, dtype=float)
        G = self.metric
        if G.constant:
            return 2.0 * G.matrix(x) @ x
        if x.ndim == 1:
            return G.matrix(x) @ (-2.0 * G.log_map(x, np.zeros_like(x)).v)
        return np.stack([self.dV(x[:, b]) for b in range(x.shape[1])], axis=1)

    def lie_b(self, x) -> np.ndarray:
        """(L_b V)(x), one entry per control."""
        x = np.asarray(x, dtype=float)
        b = self.system.input_matrix(x)
        dv = self.dV(x)
        if x.ndim == 1:
            return b.T @ dv
        return np.einsum("kim,ik->mk", b, dv)

    def __call__(self, x) -> np.ndarray:
        return self.system.clamp(-self.gamma * self.lie_b(x))

    def closed_loop(self, t, x) -> np.ndarray:
        return self.system.f(x, self(x))

    def vdot(self, x):
        """dV/dt along the damped closed loop."""
        x = np.asarray(x, dtype=float)
        return np.sum(self.dV(x) * self.closed_loop(0.0, x), axis=0)


def jq_feedback(sys: SystemSpec, metric: MetricField, gamma: float) -> JQFeedback:
    return JQFeedback(sys, metric, gamma)
