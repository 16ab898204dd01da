"""Sampled weak-contraction checks and trajectory-pair non-expansion tests.

Sampling can only falsify: a passing report means "no violation found in N
samples", not a proof.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from .geometry import MetricField
from .linalg import max_eig
from .ode import rk4_solve
from .system import SystemSpec

DEFAULT_TOL = 1e-8
MAX_CORNERS = 4096


def metric_lie_derivative(sys: SystemSpec, G: MetricField, x, u) -> np.ndarray:
    """L_{f_u} g at x as a matrix: J^T G + G J + (dG along f)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    J = sys.jac_x(x, u)
    S = J.T @ G.matrix(x)
    return S + S.T + G.directional_derivative(x, sys.f(x, u))


@dataclass
class ContractionReport:
    max_eig: float
    witness_x: np.ndarray
    witness_u: np.ndarray
    witness_vec: np.ndarray
    samples: int
    state_box: tuple
    control_box: tuple
    tolerance: float = DEFAULT_TOL

    @property
    def passed(self) -> bool:
        return self.max_eig <= self.tolerance

    @property
    def verdict(self) -> str:
        if self.passed:
            return f"pass (no violation found in {self.samples} samples)"
        return f"fail (max eigenvalue {self.max_eig:.6g} > {self.tolerance:g})"

    def recheck(self, sys: SystemSpec, G: MetricField) -> float:
        """Re-evaluate v^T M v at the witness; should reproduce max_eig."""
        M = metric_lie_derivative(sys, G, self.witness_x, self.witness_u)
        v = self.witness_vec
        return float(v @ M @ v)


def _box(lo, hi, dim):
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (dim,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (dim,)).copy()
    if np.any(hi < lo) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("boxes must be finite with lo <= hi")
    return lo, hi


def sample_points(state_box, control_box, n: int, m: int, samples: int, seed: int):
    """Origin, box corners, then scrambled-Halton points, as rows of (x, u)."""
    xlo, xhi = _box(*state_box, n)
    ulo, uhi = _box(*control_box, m)
    lo = np.concatenate([xlo, ulo])
    hi = np.concatenate([xhi, uhi])
    pts = [np.zeros(n + m)]
    if 2 ** (n + m) <= MAX_CORNERS:
        for corner in itertools.product((0, 1), repeat=n + m):
            c = np.array(corner, dtype=bool)
            pts.append(np.where(c, hi, lo))
    pts = np.array(pts)
    if samples > 0:
        halton = qmc.Halton(d=n + m, scramble=True, seed=seed).random(samples)
        pts = np.vstack([pts, lo + halton * (hi - lo)])
    return pts


def certify_weak_contraction(sys: SystemSpec, G: MetricField, state_box, control_box,
                             samples: int = 1000, seed: int = 0,
                             tol: float = DEFAULT_TOL) -> ContractionReport:
    """Largest eigenvalue of L_{f_u} g over sampled (x, u) in the boxes.

    Boxes are ``(lo, hi)`` pairs (scalars broadcast). Ties keep the lowest
    sample index.
    """
    n, m = sys.n, sys.m
    pts = sample_points(state_box, control_box, n, m, samples, seed)
    best = -np.inf
    wit = None
    for row in pts:
        x, u = row[:n], row[n:]
        lam, vec = max_eig(metric_lie_derivative(sys, G, x, u))
        if lam > best:
            best, wit = lam, (x, u, vec)
    return ContractionReport(
        max_eig=float(best), witness_x=wit[0], witness_u=wit[1], witness_vec=wit[2],
        samples=len(pts), state_box=tuple(a.tolist() for a in _box(*state_box, n)),
        control_box=tuple(a.tolist() for a in _box(*control_box, m)), tolerance=tol)


@dataclass
class NonexpansionReport:
    times: np.ndarray
    distances: np.ndarray  # (K,) or (K, B)
    max_increase_rate: float | np.ndarray  # per pair, floored at 0


def _distances(G: MetricField, a, b) -> np.ndarray:
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    return np.sqrt(np.maximum(G.d2_batch(a, b), 0.0))


def nonexpansion_test(sys: SystemSpec, G: MetricField, x1, x2, u, T: float, h: float,
                      record_every: int = 1) -> NonexpansionReport:
    """Integrate two trajectories under the same control u(t) and track d_g.

    ``x1``/``x2`` may be (n,) or (n, B); ``u`` is a callable t -> (m,) or (m, B).
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    n = sys.n

    def rhs(t, y):
        ut = u(t)
        return np.concatenate([sys.f(y[:n], ut), sys.f(y[n:], ut)])

    times, states = rk4_solve(rhs, np.concatenate([x1, x2]), T, h, record_every)
    if states.ndim == 2:
        d = np.array([_distances(G, s[:n], s[n:])[0] for s in states])
    else:
        d = np.stack([_distances(G, s[:n], s[n:]) for s in states])
    dt = times[1] - times[0]
    rate = np.maximum((np.diff(d, axis=0) / dt).max(axis=0), 0.0)
    if np.ndim(rate) == 0:
        rate = float(rate)
    return NonexpansionReport(times, d, rate)
