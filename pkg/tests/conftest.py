from __future__ import annotations

import numpy as np
import pytest

from wcstab import bundled_scenario
from wcstab.geometry import MetricField, pullback_from_jacobian
from wcstab.system import SystemSpec

SCENARIOS = ("oscillator", "bilinear", "bilinear_jq", "expanding", "pullback")


def scenario_path(name: str) -> str:
    return str(bundled_scenario(name))


def oscillator() -> SystemSpec:
    return SystemSpec.from_strings(["x2", "-x1 + u1"], m=1)


def bilinear() -> SystemSpec:
    # b(x) = (0, 1) + J x with J = 0.5 [[0, 1], [-1, 0]]
    return SystemSpec.from_strings(["x2 + 0.5*x2*u1", "-x1 + (1 - 0.5*x1)*u1"], m=1)


def quadratic_pullback() -> MetricField:
    """G = Dphi^T Dphi for phi(x) = (x1, x2 + x1^2)."""
    return pullback_from_jacobian([["1", "0"], ["2*x1", "1"]])


def sine_pullback() -> MetricField:
    """G = Dphi^T Dphi for phi(x) = (x1, x2 + sin(x1))."""
    return pullback_from_jacobian([["1", "0"], ["cos(x1)", "1"]])


def phi_quadratic(x):
    return np.array([x[0], x[1] + x[0] ** 2])


def phi_sine(x):
    return np.array([x[0], x[1] + np.sin(x[0])])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not any(mod.RESULTS.values()):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
