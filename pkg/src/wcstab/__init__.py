"""Global dynamic stabilizers for weakly contractive control systems.

The package turns a local static stabilizer into a dynamic feedback driven by
the gradient of a Riemannian squared distance, certifies the ingredients by
sampling, and monitors every closed-loop inequality during simulation.
"""
from __future__ import annotations

from importlib import resources

from .contraction import (ContractionReport, NonexpansionReport, certify_weak_contraction,
                          metric_lie_derivative, nonexpansion_test)
from .exprdsl import EvalError, ExprError, ExprSyntaxError, jacobian, parse_expr
from .geometry import GeodesicError, LogMapResult, MetricError, MetricField, pullback_from_jacobian
from .scenario import Scenario, ScenarioError, load_scenario, parse_scenario
from .sim import MonitorReport, TrajectoryTrace, integrate, monitor, pair_distance_series
from .stabilizer import (ClosedLoopSystem, JQFeedback, LinearFeedback, LyapunovCertificate,
                         build_certificate, jq_feedback, local_lqr, solve_lyapunov)
from .system import PiecewiseConstant, SystemSpec

__version__ = "0.1.0"


def bundled_scenario(name: str):
    """Path-like handle to a scenario shipped with the package, e.g. ``"oscillator"``."""
    fname = name if name.endswith(".scn") else f"{name}.scn"
    return resources.files(__package__).joinpath("scenarios", fname)


__all__ = [
    "ClosedLoopSystem", "ContractionReport", "EvalError", "ExprError", "ExprSyntaxError",
    "GeodesicError", "JQFeedback", "LinearFeedback", "LogMapResult", "LyapunovCertificate",
    "MetricError", "MetricField", "MonitorReport", "NonexpansionReport", "PiecewiseConstant",
    "Scenario", "ScenarioError", "SystemSpec", "TrajectoryTrace", "build_certificate",
    "bundled_scenario", "certify_weak_contraction", "integrate", "jacobian", "jq_feedback",
    "load_scenario", "local_lqr", "metric_lie_derivative", "monitor", "nonexpansion_test",
    "pair_distance_series", "parse_expr", "parse_scenario", "pullback_from_jacobian",
    "solve_lyapunov",
]
