from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import oscillator
from wcstab.contraction import nonexpansion_test
from wcstab.geometry import MetricField
from wcstab.ode import BlowUpError
from wcstab.sim import (TrajectoryTrace, central_derivative, integrate, monitor,
                        pair_distance_series, trace_csv)
from wcstab.stabilizer import (ClosedLoopSystem, LinearFeedback, build_certificate,
                               local_lqr)
from wcstab.system import PiecewiseConstant, SystemSpec

I2 = MetricField.identity(2)


def decay(t, x):
    return -x


def test_rk4_exponential():
    tr = integrate(decay, np.array([1.0]), 1.0, 1e-3)
    assert abs(tr.states[-1, 0] - math.exp(-1)) <= 1e-8
    assert len(tr.times) == 1001 and tr.times[-1] == 1.0


def test_rk4_order():
    def err(h):
        return abs(integrate(decay, np.array([1.0]), 1.0, h).states[-1, 0] - math.exp(-1))
    factor = err(0.1) / err(0.05)
    assert 12 <= factor <= 20


def test_rotation_preserves_norm():
    A = np.array([[0.0, 2.0], [-2.0, 0.0]])
    tr = integrate(lambda t, x: A @ x, np.array([3.0, 4.0]), 10.0, 1e-3, record_every=50)
    assert np.abs(np.linalg.norm(tr.states, axis=1) - 5.0).max() <= 1e-9


@pytest.mark.parametrize("T, h", [(0.0, 1e-3), (-1.0, 1e-3), (1.0, 0.0), (1.0, -0.1)])
def test_bad_horizon_or_step_rejected(T, h):
    with pytest.raises(ValueError):
        integrate(decay, np.array([1.0]), T, h)


def test_times_are_uniform():
    tr = integrate(decay, np.array([1.0]), 2.0, 1e-2, record_every=5)
    assert np.allclose(np.diff(tr.times), 0.05, rtol=0, atol=1e-12)


def test_blow_up_keeps_partial_trace():
    with pytest.raises(BlowUpError) as exc:
        integrate(lambda t, x: x * x, np.array([1.0]), 2.0, 1e-3)
    tr = exc.value.trace
    assert not tr.complete
    assert 0.9 < tr.times[-1] < 1.01  # exact solution 1/(1 - t) escapes at t = 1
    assert np.all(np.isfinite(tr.states))


def test_batched_integration_matches_single():
    X0 = np.array([[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]])
    A = np.array([[-0.3, 1.0], [-1.0, -0.2]])
    batch = integrate(lambda t, x: A @ x, X0, 3.0, 1e-2)
    assert len(batch) == 3
    for b in range(3):
        single = integrate(lambda t, x: A @ x, X0[:, b], 3.0, 1e-2)
        assert np.allclose(batch[b].states, single.states, rtol=0, atol=1e-15)


def test_central_derivative_is_fourth_order():
    t = np.linspace(0, 1, 101)
    d, off = central_derivative(np.sin(t), t[1] - t[0])
    assert off == 2
    assert np.abs(d - np.cos(t[2:-2])).max() <= 1e-8


# -- closed loop + monitor ---------------------------------------------------------------

def _oscillator_loop(q=10.0):
    A = np.array([[0.0, 1.0], [-1.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    K, _ = local_lqr(A, B, q)
    lam = LinearFeedback(K)
    cert = build_certificate(oscillator(), lam)
    return ClosedLoopSystem(oscillator(), I2, lam, cert)


def test_closed_loop_trace_columns():
    cl = _oscillator_loop()
    tr = integrate(cl, np.array([1.0, 0.0, 0.0, 0.0]), 1.0, 1e-2)
    for key in ("V", "d2", "alpha", "knorm", "dissipation"):
        assert tr.columns[key].shape == tr.times.shape
        assert np.all(np.isfinite(tr.columns[key]))
    assert tr.columns["alpha"][0] == pytest.approx(cl.alpha([1.0, 0.0], [0.0, 0.0]))


def test_closed_loop_needs_augmented_state():
    with pytest.raises(ValueError):
        integrate(_oscillator_loop(), np.array([1.0, 0.0]), 1.0, 1e-2)


@pytest.mark.slow
def test_oscillator_monitor_is_clean():
    cl = _oscillator_loop()
    tr = integrate(cl, np.array([3.0, -1.0, 0.0, 0.0]), 60.0, 1e-3)
    rep = monitor(tr, cl.certificate)
    assert rep.ok, rep.violations[:3]
    assert rep.terminal_norm <= 1e-3


def test_identical_start_keeps_zero_distance():
    cl = _oscillator_loop()
    tr = integrate(cl, np.array([2.0, 1.0, 2.0, 1.0]), 5.0, 1e-2)
    assert np.abs(tr.columns["d2"]).max() <= 1e-12


def test_expanding_trace_is_flagged_at_first_step():
    # x' = x paired with a model frozen at 0, dressed up as closed-loop columns
    t = np.linspace(0, 1, 101)
    x = np.exp(t)
    states = np.stack([x, np.zeros_like(x)], axis=1)
    cols = {"V": np.zeros_like(t), "d2": x ** 2, "alpha": np.zeros_like(t),
            "knorm": np.zeros_like(t), "dissipation": np.zeros_like(t)}
    tr = TrajectoryTrace(t, states, cols, n=1)
    rep = monitor(tr)
    assert not rep.ok
    first = rep.violations[0]
    assert first.kind == "monotonicity" and first.index == 0


def test_lyapunov_bound_violation_is_reported():
    t = np.linspace(0, 1, 11)
    V = np.concatenate([np.full(5, 0.5), np.full(6, 2.0)])
    cols = {"V": V, "d2": np.zeros_like(t), "alpha": np.zeros_like(t),
            "knorm": np.zeros_like(t), "dissipation": np.zeros_like(t)}
    rep = monitor(TrajectoryTrace(t, np.zeros((11, 2)), cols, n=1))
    kinds = {v.kind for v in rep.violations}
    assert kinds == {"lyapunov"} and rep.violations[0].index == 5


def test_csv_format_and_determinism():
    cl = _oscillator_loop()
    y0 = np.array([1.5, -0.5, 0.1, 0.0])
    a = trace_csv(integrate(cl, y0, 0.5, 1e-2))
    b = trace_csv(integrate(cl, y0, 0.5, 1e-2))
    assert a == b
    lines = a.split("\n")
    assert lines[0] == "t,x1,x2,xh1,xh2,V,d2,alpha,knorm"
    assert "\r" not in a and a.endswith("\n")
    tr = integrate(cl, y0, 0.5, 1e-2)
    row = [float(v) for v in lines[3].split(",")]
    assert row[1:5] == tr.states[2].tolist()  # shortest round-trip decimals are exact


def test_open_loop_csv_header():
    tr = integrate(decay, np.array([1.0, 2.0]), 0.1, 0.05)
    assert trace_csv(tr).split("\n")[0] == "t,x1,x2"


# -- pair distance series -----------------------------------------------------------------

def test_pair_distance_series_delegates(rng):
    u = PiecewiseConstant.random(rng, 1, 3.0, 3)
    x1, x2 = rng.normal(size=(2, 2))
    a = pair_distance_series(oscillator(), I2, x1, x2, u, 3.0, 1e-2)
    b = nonexpansion_test(oscillator(), I2, x1, x2, u, 3.0, 1e-2)
    assert np.array_equal(a.distances, b.distances) and a.max_increase_rate == b.max_increase_rate


def test_pair_distance_exponential_decay():
    sys_ = SystemSpec.from_strings(["-0.5*x1", "-0.5*x2"], m=0)
    rep = pair_distance_series(sys_, I2, [1.0, 1.0], [-1.0, 0.0], PiecewiseConstant.zero(0),
                               4.0, 1e-3, record_every=100)
    exact = math.sqrt(5.0) * np.exp(-0.5 * rep.times)
    assert np.abs(rep.distances / exact - 1).max() <= 1e-5


def test_pair_distance_zero_for_equal_states():
    rep = pair_distance_series(oscillator(), I2, [1.0, 1.0], [1.0, 1.0],
                               PiecewiseConstant.zero(1), 1.0, 1e-2)
    assert not np.any(rep.distances)
