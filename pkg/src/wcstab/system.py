"""Control systems dx/dt = f(x, u) with expression-defined vector fields."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exprdsl import Dual, Node, _der, evaluate_vector, jacobian, parse_expr

ORIGIN_TOL = 1e-12


class SystemSpecError(ValueError):
    """Invalid system definition."""


def batch_jacobian(exprs: Sequence[Node], x, u, wrt: str = "state") -> np.ndarray:
    """Jacobian at every column of x (n, N) / u (m, N); result shape (N, rows, cols)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.ndim == 1:
        return jacobian(exprs, x, u, wrt)[None]
    npts = x.shape[1]
    ncols = x.shape[0] if wrt == "state" else u.shape[0]
    out = np.zeros((npts, len(exprs), ncols))
    for j in range(ncols):
        if wrt == "state":
            xd = [Dual(x[i], 1.0 if i == j else 0.0) for i in range(x.shape[0])]
            ud = list(u)
        else:
            xd = list(x)
            ud = [Dual(u[i], 1.0 if i == j else 0.0) for i in range(u.shape[0])]
        for r, e in enumerate(exprs):
            out[:, r, j] = _der(e.eval(xd, ud))
    return out


@dataclass
class SystemSpec:
    """dx/dt = f(x, u), x in R^n, u in the open box (u_lo, u_hi) containing 0."""

    n: int
    m: int
    f_exprs: tuple
    u_lo: np.ndarray = field(default=None)
    u_hi: np.ndarray = field(default=None)

    def __post_init__(self):
        if len(self.f_exprs) != self.n:
            raise SystemSpecError(f"expected {self.n} vector-field components, got {len(self.f_exprs)}")
        self.f_exprs = tuple(self.f_exprs)
        self.u_lo = np.full(self.m, -np.inf) if self.u_lo is None else np.asarray(self.u_lo, float)
        self.u_hi = np.full(self.m, np.inf) if self.u_hi is None else np.asarray(self.u_hi, float)
        if self.u_lo.shape != (self.m,) or self.u_hi.shape != (self.m,):
            raise SystemSpecError("control bounds must have length m")
        if not (np.all(self.u_lo < 0.0) and np.all(self.u_hi > 0.0)):
            raise SystemSpecError("control box must contain 0 in its interior")
        f0 = self.f(np.zeros(self.n), np.zeros(self.m))
        if np.max(np.abs(f0), initial=0.0) > ORIGIN_TOL:
            raise SystemSpecError(f"f(0,0) ≠ 0 (got {f0.tolist()})")

    @classmethod
    def from_strings(cls, f_srcs: Sequence[str], m: int = 0, u_lo=None, u_hi=None) -> "SystemSpec":
        n = len(f_srcs)
        return cls(n, m, tuple(parse_expr(s, n, m) for s in f_srcs), u_lo, u_hi)

    def f(self, x, u) -> np.ndarray:
        out = evaluate_vector(self.f_exprs, x, u)
        if np.ndim(x) == 2 and out.ndim == 1:
            out = np.repeat(out[:, None], np.shape(x)[1], axis=1)
        return out

    def jac_x(self, x, u) -> np.ndarray:
        return jacobian(self.f_exprs, x, u, "state")

    def jac_u(self, x, u) -> np.ndarray:
        return jacobian(self.f_exprs, x, u, "control")

    # control-affine view of the drift/input split
    def drift(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        return self.f(x, np.zeros((self.m,) + x.shape[1:]))

    def input_matrix(self, x) -> np.ndarray:
        """b(x) = df/du(x, 0); shape (n, m), or (N, n, m) for batched x."""
        x = np.asarray(x, float)
        u0 = np.zeros((self.m,) + x.shape[1:])
        if x.ndim == 1:
            return self.jac_u(x, u0)
        return batch_jacobian(self.f_exprs, x, u0, "control")

    def clamp(self, u) -> np.ndarray:
        """Project into the open control box (just inside finite bounds)."""
        lo = np.nextafter(self.u_lo, 0.0)
        hi = np.nextafter(self.u_hi, 0.0)
        u = np.asarray(u, float)
        if u.ndim == 2:
            return np.clip(u, lo[:, None], hi[:, None])
        return np.clip(u, lo, hi)


class PiecewiseConstant:
    """Control signal u(t) = values[k] for times[k] <= t < times[k+1].

    ``values`` has shape (K, m) or (K, m, B) for a batch of B signals.
    """

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.times.ndim != 1 or len(self.times) != len(self.values):
            raise ValueError("times and values must have matching length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("switch times must be strictly increasing")

    def __call__(self, t: float) -> np.ndarray:
        k = max(int(np.searchsorted(self.times, t, side="right")) - 1, 0)
        return self.values[k]

    @classmethod
    def random(cls, rng: np.random.Generator, m: int, T: float, pieces: int,
               lo=-1.0, hi=1.0, batch: int | None = None) -> "PiecewiseConstant":
        times = np.linspace(0.0, T, pieces, endpoint=False)
        shape = (pieces, m) if batch is None else (pieces, m, batch)
        return cls(times, rng.uniform(lo, hi, size=shape))

    @classmethod
    def zero(cls, m: int, batch: int | None = None) -> "PiecewiseConstant":
        shape = (1, m) if batch is None else (1, m, batch)
        return cls([0.0], np.zeros(shape))
