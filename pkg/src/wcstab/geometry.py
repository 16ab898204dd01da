"""Riemannian metrics on R^n given by expression matrices G(x).

Geodesics are integrated with fixed-step RK4; the log map is found by damped
Newton shooting on ``v -> exp_xh(v) - x``. Constant metrics short-circuit to
closed forms everywhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exprdsl import Dual, EvalError, Node, _der, parse_expr

PD_TOL = 1e-10
BLOWUP = 1e12


class MetricError(Exception):
    """Invalid metric: asymmetric, not positive definite, or singular."""


class GeodesicError(Exception):
    """Geodesic integration blew up or log-map shooting did not converge."""

    def __init__(self, msg: str, best_residual: float = math.inf, iterations: int = 0):
        super().__init__(msg)
        self.best_residual = best_residual
        self.iterations = iterations


@dataclass(frozen=True)
class LogMapResult:
    v: np.ndarray
    distance: float
    residual: float
    iterations: int


def geodesic_steps(v) -> int:
    return max(64, math.ceil(16.0 * float(np.linalg.norm(v))))


class MetricField:
    """Symmetric matrix of expressions G(x) defining a Riemannian metric."""

    def __init__(self, entries: Sequence[Sequence[Node]]):
        n = len(entries)
        if n == 0 or any(len(row) != n for row in entries):
            raise MetricError("metric must be a non-empty square matrix")
        for i in range(n):
            for j in range(i + 1, n):
                if entries[i][j] != entries[j][i]:
                    raise MetricError(
                        f"metric not symmetric: G[{i + 1},{j + 1}] = {entries[i][j]} "
                        f"but G[{j + 1},{i + 1}] = {entries[j][i]}")
        self.n = n
        self.entries = tuple(tuple(row) for row in entries)
        self._upper = [(i, j) for i in range(n) for j in range(i, n)]
        self._upper_exprs = [self.entries[i][j] for i, j in self._upper]
        self._upper_fns = [e.compiled for e in self._upper_exprs]
        self.constant = all(e.is_constant for e in self._upper_exprs)
        self._G0 = None
        if self.constant:
            self._G0 = self._assemble([e.eval() for e in self._upper_exprs])
            self._check_pd(self._G0, None)
            self._G0inv = np.linalg.inv(self._G0)
            self._G0.setflags(write=False)

    @classmethod
    def identity(cls, n: int) -> "MetricField":
        return cls.from_matrix(np.eye(n))

    @classmethod
    def from_matrix(cls, g) -> "MetricField":
        g = np.asarray(g, dtype=float)
        n = g.shape[0]
        return cls([[parse_expr(repr(float(g[i, j])), n, 0) if g[i, j] >= 0
                     else parse_expr("-" + repr(float(-g[i, j])), n, 0)
                     for j in range(n)] for i in range(n)])

    @classmethod
    def from_strings(cls, rows: Sequence[Sequence[str]]) -> "MetricField":
        n = len(rows)
        return cls([[parse_expr(s, n, 0) for s in row] for row in rows])

    def _assemble(self, vals) -> np.ndarray:
        g = np.empty((self.n, self.n))
        for (i, j), v in zip(self._upper, vals):
            g[i, j] = g[j, i] = v
        return g

    @staticmethod
    def _check_pd(g, x):
        lam = np.linalg.eigvalsh(g)[0]
        if not lam > PD_TOL:
            raise MetricError(f"metric not positive definite at x={x} (min eigenvalue {lam:.3e})")

    # -- pointwise quantities ------------------------------------------------

    def matrix(self, x) -> np.ndarray:
        """G(x), checked positive definite."""
        if self.constant:
            return self._G0
        x = [float(v) for v in x]
        g = self._assemble([e.eval(x) for e in self._upper_exprs])
        self._check_pd(g, x)
        return g

    def inner(self, x, v, w) -> float:
        g = self.matrix(x)
        v, w = np.asarray(v, float), np.asarray(w, float)
        # symmetric by construction: evaluate as the symmetrised bilinear form
        return 0.5 * (float(v @ g @ w) + float(w @ g @ v))

    def norm(self, x, v) -> float:
        return math.sqrt(max(self.inner(x, v, v), 0.0))

    def directional_derivative(self, x, v) -> np.ndarray:
        """sum_l v_l dG/dx_l at x (entrywise, symmetric)."""
        if self.constant:
            return np.zeros((self.n, self.n))
        xd = [Dual(float(a), float(b)) for a, b in zip(x, v)]
        return self._assemble([_der(e.eval(xd)) for e in self._upper_exprs])

    def partials(self, x) -> np.ndarray:
        """Array dG[l] = dG/dx_l, shape (n, n, n)."""
        eye = np.eye(self.n)
        return np.stack([self.directional_derivative(x, eye[l]) for l in range(self.n)])

    def christoffel(self, x) -> np.ndarray:
        """Christoffel symbols of the second kind, ``gamma[k, i, j]``."""
        if self.constant:
            return np.zeros((self.n,) * 3)
        g = self.matrix(x)
        dg = self.partials(x)  # dg[l, a, b] = d_l G_ab
        # first kind: Gamma_{l,ij} = 1/2 (d_i G_jl + d_j G_il - d_l G_ij)
        first = 0.5 * (np.transpose(dg, (2, 0, 1)) + np.transpose(dg, (2, 1, 0)) - dg)
        try:
            out = np.linalg.solve(g, first.reshape(self.n, -1)).reshape((self.n,) * 3)
        except np.linalg.LinAlgError as exc:
            raise MetricError(f"singular metric at x={list(x)}") from exc
        return 0.5 * (out + np.transpose(out, (0, 2, 1)))

    # -- paths and geodesics ------------------------------------------------

    def path_length(self, samples) -> float:
        """Length of the polyline through ``samples`` (midpoint rule per segment)."""
        pts = np.asarray(samples, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise ValueError("path_length needs at least two samples (N >= 1 segments)")
        total = 0.0
        for a, b in zip(pts[:-1], pts[1:]):
            total += self.norm(0.5 * (a + b), b - a)
        return total

    def _christoffel_batch(self, P) -> np.ndarray:
        """Christoffel symbols at the columns of ``P`` (n, B), shape (B, n, n, n).

        Hot path of geodesic integration: uses the compiled closures directly;
        NaN and overflow surface through the integrator's finiteness check.
        """
        n, B = P.shape
        xs = list(P)
        g = np.empty((B, n, n))
        dg = np.empty((B, n, n, n))  # dg[b, l, i, j] = d_l G_ij
        duals = [[Dual(P[i], 1.0 if i == l else 0.0) for i in range(n)] for l in range(n)]
        for (i, j), fn in zip(self._upper, self._upper_fns):
            g[:, i, j] = g[:, j, i] = fn(xs, ())
            for l in range(n):
                dg[:, l, i, j] = dg[:, l, j, i] = _der(fn(duals[l], ()))
        lam = np.linalg.eigvalsh(g)[:, 0]
        if not np.all(lam > PD_TOL):
            b = int(np.argmin(np.where(np.isnan(lam), -np.inf, lam)))
            raise MetricError(f"metric not positive definite at x={P[:, b].tolist()} "
                              f"(min eigenvalue {lam[b]:.3e})")
        first = 0.5 * (np.transpose(dg, (0, 3, 1, 2)) + np.transpose(dg, (0, 3, 2, 1)) - dg)
        out = np.linalg.solve(g, first.reshape(B, n, n * n)).reshape(B, n, n, n)
        return 0.5 * (out + np.transpose(out, (0, 1, 3, 2)))

    def _geodesic_rhs(self, p, q):
        gam = self._christoffel_batch(p)
        return q, -np.einsum("bkij,ib,jb->kb", gam, q, q)

    def exp_map(self, xh, v, steps: int | None = None) -> np.ndarray:
        """Time-1 endpoint of the geodesic from ``xh`` with initial velocity ``v``.

        ``v`` may be a batch of shape (n, B) sharing the base point; the batch
        then uses the step count of its longest velocity unless ``steps`` is given.
        """
        xh = np.asarray(xh, dtype=float)
        v = np.asarray(v, dtype=float)
        if not np.all(np.isfinite(v)):
            raise GeodesicError("non-finite initial velocity")
        batched = v.ndim == 2
        if self.constant:
            return (xh[:, None] if batched and xh.ndim == 1 else xh) + v
        if not np.any(v):
            return np.broadcast_to(xh[:, None] if batched and xh.ndim == 1 else xh, v.shape).copy()
        if steps is None:
            steps = max(geodesic_steps(c) for c in (v.T if batched else [v]))
        steps = int(steps)
        h = 1.0 / steps
        q = v if batched else v[:, None]
        p = np.broadcast_to(xh[:, None] if xh.ndim == 1 else xh, q.shape).copy()
        q = q.copy()
        for _ in range(steps):
            k1p, k1q = self._geodesic_rhs(p, q)
            k2p, k2q = self._geodesic_rhs(p + 0.5 * h * k1p, q + 0.5 * h * k1q)
            k3p, k3q = self._geodesic_rhs(p + 0.5 * h * k2p, q + 0.5 * h * k2q)
            k4p, k4q = self._geodesic_rhs(p + h * k3p, q + h * k3q)
            p = p + h / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
            q = q + h / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q)
            if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))) or \
                    max(np.abs(p).max(), np.abs(q).max()) > BLOWUP:
                raise GeodesicError("geodesic integration blew up")
        return p if batched else p[:, 0]

    def log_map(self, xh, x, tol: float = 1e-8, max_iter: int = 50) -> LogMapResult:
        """Tangent v at ``xh`` with exp_xh(v) = x, by damped Newton shooting."""
        xh = np.asarray(xh, dtype=float)
        x = np.asarray(x, dtype=float)
        v = x - xh
        if self.constant:
            return LogMapResult(v, self.norm(xh, v), 0.0, 1)
        r = self.exp_map(xh, v) - x
        res = float(np.linalg.norm(r))
        it = 0
        while res > tol:
            if it >= max_iter:
                raise GeodesicError(
                    f"log map shooting did not converge after {max_iter} iterations "
                    f"(best residual {res:.3e}); minimizing geodesic may be non-unique",
                    res, it)
            it += 1
            eps = 1e-7 * max(1.0, float(np.linalg.norm(v)))
            # all forward-difference columns in one batched shot, same grid as v
            shots = self.exp_map(xh, v[:, None] + eps * np.eye(self.n), steps=geodesic_steps(v))
            jac = (shots - (x + r)[:, None]) / eps
            try:
                step = np.linalg.solve(jac, -r)
            except np.linalg.LinAlgError:
                raise GeodesicError("singular shooting Jacobian (conjugate point?)", res, it) from None
            t = 1.0
            while True:
                v_new = v + t * step
                r_new = self.exp_map(xh, v_new) - x
                res_new = float(np.linalg.norm(r_new))
                if res_new < res:
                    v, r, res = v_new, r_new, res_new
                    break
                t *= 0.5
                if t < 1e-6:
                    raise GeodesicError(
                        f"log map line search stalled (best residual {res:.3e})", res, it)
        return LogMapResult(v, self.norm(xh, v), res, it)

    def distance(self, x1, x2) -> float:
        x1 = np.asarray(x1, dtype=float)
        return self.log_map(x1, x2).distance

    def grad_d2(self, x, xh) -> np.ndarray:
        """Riemannian gradient at xh of xh -> d_g(x, xh)^2, equal to -2 log_xh(x)."""
        return -2.0 * self.log_map(xh, x).v

    # -- batched variants (columns are points) -------------------------------

    def grad_d2_batch(self, x, xh) -> np.ndarray:
        if self.constant:
            return -2.0 * (x - xh)
        return np.stack([self.grad_d2(x[:, b], xh[:, b]) for b in range(x.shape[1])], axis=1)

    def log_batch(self, xh, x):
        """Columnwise log vectors (n, B) and squared distances (B,)."""
        if self.constant:
            v = x - xh
            return v, np.einsum("ib,ij,jb->b", v, self._G0, v)
        res = [self.log_map(xh[:, b], x[:, b]) for b in range(x.shape[1])]
        return np.stack([r.v for r in res], axis=1), np.array([r.distance ** 2 for r in res])

    def d2_batch(self, x, xh) -> np.ndarray:
        if self.constant:
            d = x - xh
            return np.einsum("ib,ij,jb->b", d, self._G0, d)
        return np.array([self.log_map(xh[:, b], x[:, b]).distance ** 2 for b in range(x.shape[1])])

    def sqnorm_batch(self, at, v) -> np.ndarray:
        """|v_b|^2_{g(at_b)} for each column b."""
        if self.constant:
            return np.einsum("ib,ij,jb->b", v, self._G0, v)
        return np.array([self.inner(at[:, b], v[:, b], v[:, b]) for b in range(v.shape[1])])


def pullback_from_jacobian(dphi: Sequence[Sequence[str]]) -> MetricField:
    """Metric DphiT Dphi from the expression matrix Dphi."""
    n = len(dphi)
    rows = []
    for i in range(n):
        row = []
        for j in range(n):
            terms = [f"({dphi[k][i]})*({dphi[k][j]})" for k in range(n)]
            row.append(" + ".join(terms))
        rows.append(row)
    # symmetric by expression equality requires identical strings; mirror upper
    for i in range(n):
        for j in range(i):
            rows[i][j] = rows[j][i]
    return MetricField.from_strings(rows)


__all__ = [
    "GeodesicError", "LogMapResult", "MetricError", "MetricField",
    "geodesic_steps", "pullback_from_jacobian", "EvalError",
]
