"""Deterministic simulation of open and closed loops, plus runtime monitors."""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .contraction import NonexpansionReport, nonexpansion_test
from .ode import BlowUpError, rk4_solve
from .stabilizer import ClosedLoopSystem

DERIVED = ("V", "d2", "alpha", "knorm")


@dataclass
class TrajectoryTrace:
    times: np.ndarray
    states: np.ndarray  # (K, dim)
    columns: dict = field(default_factory=dict)
    n: int | None = None  # plant dimension when states hold (x, xh)
    complete: bool = True

    @property
    def h_record(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    @property
    def x(self) -> np.ndarray:
        return self.states[:, : self.n] if self.n else self.states

    @property
    def xh(self) -> np.ndarray:
        return self.states[:, self.n:]

    def terminal_norm(self) -> float:
        if self.n:
            return float(np.linalg.norm(self.x[-1]) + np.linalg.norm(self.xh[-1]))
        return float(np.linalg.norm(self.states[-1]))


def annotate(trace: TrajectoryTrace, cl: ClosedLoopSystem) -> TrajectoryTrace:
    """Fill the monitored columns of a (x, xh) trace from the closed loop."""
    n = cl.system.n
    trace.n = n
    cols = cl.derived(trace.states[:, :n].T, trace.states[:, n:].T)
    trace.columns.update(cols)
    return trace


def integrate(rhs, x0, T: float, h: float, record_every: int = 1):
    """Classical RK4 with fixed step ``h`` on [0, T].

    ``rhs`` is ``rhs(t, y)`` or a :class:`ClosedLoopSystem`, whose monitored
    columns are then filled in. A batch ``x0`` of shape (dim, B) returns a list
    of traces. On blow-up the :class:`BlowUpError` carries the partial trace(s)
    in ``.trace``.
    """
    x0 = np.asarray(x0, dtype=float)
    cl = rhs if isinstance(rhs, ClosedLoopSystem) else None
    n = cl.system.n if cl else None
    if cl is not None and x0.shape[0] != cl.dim:
        raise ValueError(f"closed loop needs a {cl.dim}-dimensional initial state (x, xh)")

    def build(times, states, complete):
        if states.ndim == 2:
            traces = [TrajectoryTrace(times, states, n=n, complete=complete)]
        else:
            traces = [TrajectoryTrace(times, states[:, :, b], n=n, complete=complete)
                      for b in range(states.shape[2])]
        if cl is not None:
            for tr in traces:
                annotate(tr, cl)
        return traces[0] if states.ndim == 2 else traces

    try:
        times, states = rk4_solve(rhs, x0, T, h, record_every)
    except BlowUpError as exc:
        exc.trace = build(exc.times, exc.states, False)
        raise
    return build(times, states, True)


def central_derivative(y, dt: float):
    """Fourth-order central difference at interior samples.

    Returns ``(dy, offset)`` where ``dy[j]`` is the derivative at sample
    ``j + offset``; falls back to the 3-point stencil on short series.
    """
    y = np.asarray(y, dtype=float)
    if len(y) >= 5:
        return (y[:-4] - 8.0 * y[1:-3] + 8.0 * y[3:-1] - y[4:]) / (12.0 * dt), 2
    if len(y) >= 3:
        return (y[2:] - y[:-2]) / (2.0 * dt), 1
    return np.empty(0), 0


@dataclass
class Violation:
    kind: str  # "lyapunov" | "dissipation" | "monotonicity"
    index: int
    t: float
    excess: float

    def __str__(self):
        return f"{self.kind} at t={self.t:g} (index {self.index}) excess {self.excess:.3e}"


@dataclass
class MonitorReport:
    violations: list
    terminal_norm: float
    terminal_d2: float
    max_V: float
    notes: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def monitor(trace: TrajectoryTrace, cert=None, threshold: float = 1.0,
            tol_V: float | None = None, tol_d: float | None = None) -> MonitorReport:
    """Check the closed-loop invariants along a trace.

    (a) V(xh(t)) <= max(V(xh0), threshold) + tol_V
    (b) central-difference d/dt d2 <= -alpha |grad d2|_g^2 + tol_d
    (c) d2 non-increasing, increments per unit time <= tol_d
    Defaults: tol_V = 1e-6 (1 + max V), tol_d = 1e-6 (1 + d2(0)).
    """
    V = np.asarray(trace.columns["V"])
    d2 = np.asarray(trace.columns["d2"])
    diss = np.asarray(trace.columns["dissipation"])
    t = trace.times
    if tol_V is None:
        tol_V = 1e-6 * (1.0 + float(V.max()))
    if tol_d is None:
        tol_d = 1e-6 * (1.0 + float(d2[0]))
    out = []
    bound = max(float(V[0]), threshold)
    for i in np.nonzero(V > bound + tol_V)[0]:
        out.append(Violation("lyapunov", int(i), float(t[i]), float(V[i] - bound)))
    if len(t) > 1:
        dt = trace.h_record
        inc = np.diff(d2) / dt
        for i in np.nonzero(inc > tol_d)[0]:
            out.append(Violation("monotonicity", int(i), float(t[i]), float(inc[i])))
        cd, off = central_derivative(d2, dt)
        excess = cd + diss[off:len(d2) - off]
        for i in np.nonzero(excess > tol_d)[0]:
            out.append(Violation("dissipation", int(i) + off, float(t[i + off]), float(excess[i])))
    out.sort(key=lambda v: (v.index, v.kind))
    notes = []
    if cert is not None and np.isfinite(cert.r_star) and V.max() > cert.r_star:
        notes.append(f"xh left the certified region D(r*) (max V {V.max():.6g} > r* {cert.r_star:.6g})")
    return MonitorReport(out, trace.terminal_norm(), float(d2[-1]), float(V.max()), notes)


def pair_distance_series(sys, G, x1, x2, u, T: float, h: float,
                         record_every: int = 1) -> NonexpansionReport:
    """t -> d_g(X_u(x1, t), X_u(x2, t)); see :func:`nonexpansion_test`."""
    return nonexpansion_test(sys, G, x1, x2, u, T, h, record_every)


def _fmt(v: float) -> str:
    return repr(float(v))


def trace_csv(trace: TrajectoryTrace) -> str:
    """CSV text: closed-loop traces use ``t,x1..xn,xh1..xhn,V,d2,alpha,knorm``;
    other traces ``t,x1..xn`` plus any ``V`` column."""
    buf = io.StringIO()
    if trace.n:
        n = trace.n
        header = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"xh{i + 1}" for i in range(n)] + list(DERIVED)
        cols = [trace.columns[k] for k in DERIVED]
    else:
        n = trace.states.shape[1]
        header = ["t"] + [f"x{i + 1}" for i in range(n)]
        cols = []
        if "V" in trace.columns:
            header.append("V")
            cols.append(trace.columns["V"])
    buf.write(",".join(header) + "\n")
    for i, t in enumerate(trace.times):
        row = [_fmt(t)] + [_fmt(v) for v in trace.states[i]] + [_fmt(c[i]) for c in cols]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def write_csv(trace: TrajectoryTrace, path) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(trace_csv(trace))
