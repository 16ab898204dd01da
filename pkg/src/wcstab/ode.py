"""Fixed-step classical RK4."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

BLOWUP = 1e12


class BlowUpError(RuntimeError):
    """State norm exceeded the blow-up threshold; carries the partial solution."""

    def __init__(self, msg, times, states):
        super().__init__(msg)
        self.times = times
        self.states = states


def rk4_solve(rhs: Callable, y0, T: float, h: float, record_every: int = 1):
    """Integrate ``y' = rhs(t, y)`` on [0, T] with step h.

    ``y0`` may be (d,) or (d, B) for B independent trajectories. Returns
    ``(times, states)`` sampled every ``record_every`` steps, always including
    t=0; states have shape (K, d) or (K, d, B).
    """
    if not T > 0:
        raise ValueError(f"horizon T must be positive, got {T}")
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    nsteps = int(round(T / h))
    if nsteps < 1 or not math.isclose(nsteps * h, T, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"T={T} is not a whole number of steps h={h}")
    y = np.array(y0, dtype=float)
    nrec = nsteps // record_every + 1
    states = np.empty((nrec,) + y.shape)
    times = np.arange(nrec) * (record_every * h)
    states[0] = y
    half = 0.5 * h
    sixth = h / 6.0
    rec = 1
    for step in range(1, nsteps + 1):
        t = (step - 1) * h
        k1 = rhs(t, y)
        k2 = rhs(t + half, y + half * k1)
        k3 = rhs(t + half, y + half * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + sixth * (k1 + 2.0 * (k2 + k3) + k4)
        if not np.all(np.isfinite(y)) or np.abs(y).max() > BLOWUP:
            raise BlowUpError(f"state norm exceeded {BLOWUP:g} at t={step * h:g}",
                              times[:rec], states[:rec])
        if step % record_every == 0:
            states[rec] = y
            rec += 1
    return times[:rec], states[:rec]
