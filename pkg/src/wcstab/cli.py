"""Command-line front end: ``wcstab {certify,simulate,geodesic,selftest}``.

Exit codes: 0 success, 1 usage error, 2 runtime or validation error,
3 invariant violation.
"""
from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .contraction import certify_weak_contraction
from .exprdsl import ExprError
from .geometry import GeodesicError, MetricError
from .ode import BlowUpError
from .scenario import Scenario, ScenarioError, load_scenario
from .sim import TrajectoryTrace, Violation, integrate, monitor, write_csv
from .stabilizer import (ClosedLoopSystem, ExprFeedback, LinearFeedback, StabilizerError,
                         build_certificate, jq_feedback, linearization, local_lqr)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VIOLATION = 0, 1, 2, 3
MAX_LISTED_VIOLATIONS = 20

# errors that map to exit code 2
RUNTIME_ERRORS = (ScenarioError, ExprError, MetricError, GeodesicError, StabilizerError,
                  ValueError, FloatingPointError, np.linalg.LinAlgError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt(v) -> str:
    return repr(float(v))


def _fmt_vec(v) -> str:
    return ",".join(_fmt(a) for a in np.atleast_1d(v))


class Report:
    """Ordered ``KEY: value`` lines."""

    def __init__(self):
        self.lines: list[tuple[str, str]] = []

    def add(self, key: str, value) -> None:
        if isinstance(value, (float, np.floating)):
            value = _fmt(value)
        self.lines.append((key, str(value)))

    def update(self, d: dict) -> None:
        for k, v in d.items():
            self.add(k, v)

    def text(self) -> str:
        return "".join(f"{k}: {v}\n" for k, v in self.lines)


def _vector_arg(s: str) -> np.ndarray:
    try:
        return np.array([float(p) for p in s.split(",")], dtype=float)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


# ---------------------------------------------------------------------------
# feedback and certificate assembly


def make_feedback(sc: Scenario):
    """Local stabilizer lam(xh): LQR on the linearization or user expressions."""
    sys_ = sc.system
    fb = sc.feedback
    if fb.source == "expressions":
        return ExprFeedback(fb.exprs, sys_.n)
    if sys_.m == 0:
        return LinearFeedback(np.zeros((0, sys_.n)))
    z, u0 = np.zeros(sys_.n), np.zeros(sys_.m)
    K, _ = local_lqr(sys_.jac_x(z, u0), sys_.jac_u(z, u0), fb.q, fb.r)
    return LinearFeedback(K)


def make_certificate(sc: Scenario, lam, samples: int, seed: int):
    box = (sc.certification.state_lo, sc.certification.state_hi)
    return build_certificate(sc.system, lam, box=box, samples=samples, seed=seed)


def _apply_overrides(sc: Scenario, args) -> Scenario:
    if getattr(args, "seed", None) is not None:
        sc.simulation.seed = args.seed
        sc.certification.seed = args.seed
    if getattr(args, "samples", None) is not None:
        sc.certification.samples = args.samples
    if getattr(args, "h", None) is not None:
        sc.simulation.h = args.h
    if getattr(args, "T", None) is not None:
        sc.simulation.T = args.T
    if sc.simulation.T <= 0 or sc.simulation.h <= 0:
        raise ScenarioError("need T > 0 and h > 0", sc.path)
    if sc.certification.samples < 0:
        raise ScenarioError("samples must be non-negative", sc.path)
    return sc


# ---------------------------------------------------------------------------
# subcommands


def cmd_certify(sc: Scenario) -> tuple[int, Report]:
    """Sampled weak-contraction check plus the local Lyapunov certificate."""
    rep = Report()
    rep.add("SCENARIO", sc.name)
    rep.add("COMMAND", "certify")
    cc = sc.certification
    cr = certify_weak_contraction(sc.system, sc.metric, (cc.state_lo, cc.state_hi),
                                  (cc.control_lo, cc.control_hi), cc.samples, cc.seed,
                                  cc.tolerance)
    rep.add("CONTRACTION_VERDICT", "pass" if cr.passed else "fail")
    rep.add("CONTRACTION_MAX_EIG", cr.max_eig)
    rep.add("CONTRACTION_TOLERANCE", cr.tolerance)
    rep.add("CONTRACTION_SAMPLES", cr.samples)
    rep.add("CONTRACTION_SEED", cc.seed)
    rep.add("CONTRACTION_WITNESS_X", _fmt_vec(cr.witness_x))
    rep.add("CONTRACTION_WITNESS_U", _fmt_vec(cr.witness_u) if sc.system.m else "none")
    rep.add("CONTRACTION_WITNESS_VEC", _fmt_vec(cr.witness_vec))
    rep.add("CONTRACTION_STATE_BOX", f"{_fmt_vec(cr.state_box[0])} .. {_fmt_vec(cr.state_box[1])}")

    cert_ok = True
    if sc.feedback.mode == "jq":
        rep.add("CERT_STATUS", "skipped (jq mode uses the squared distance to 0)")
    else:
        try:
            lam = make_feedback(sc)
            cert = make_certificate(sc, lam, max(cc.samples, 1), cc.seed)
        except (StabilizerError, np.linalg.LinAlgError) as exc:
            cert_ok = False
            rep.add("CERT_STATUS", "error")
            rep.add("CERT_ERROR", str(exc).replace("\n", " "))
        else:
            rep.add("CERT_STATUS", "ok")
            rep.add("FEEDBACK", lam.describe())
            rep.add("CLOSED_LOOP_LINEARIZATION", _fmt_matrix_row(linearization(sc.system, lam)))
            rep.update(cert.summary())
    if not cr.passed:
        code = EXIT_VIOLATION
    elif not cert_ok:
        code = EXIT_RUNTIME
    else:
        code = EXIT_OK
    rep.add("EXIT", code)
    return code, rep


def _fmt_matrix_row(M) -> str:
    M = np.atleast_2d(M)
    return "[" + "; ".join(",".join(_fmt(v) for v in row) for row in M) + "]"


def _descent_violations(trace: TrajectoryTrace, tol: float) -> list:
    """V must not increase between recorded samples by more than ``tol``."""
    V = np.asarray(trace.columns["V"])
    inc = np.diff(V)
    return [Violation("lyapunov", int(i) + 1, float(trace.times[i + 1]), float(inc[i]))
            for i in np.nonzero(inc > tol)[0]]


def _run_trace(sc: Scenario, rep: Report):
    """Integrate according to the feedback mode. Returns (trace, cert, blowup_msg)."""
    sim = sc.simulation
    mode = sc.feedback.mode
    cert = None
    if mode == "jq":
        ctrl = jq_feedback(sc.system, sc.metric, sc.feedback.gamma)
        rhs, y0 = ctrl.closed_loop, sim.x0
        rep.add("FEEDBACK", f"jq damping gamma={_fmt(sc.feedback.gamma)}")
    else:
        lam = make_feedback(sc)
        cert = make_certificate(sc, lam, max(sc.certification.samples, 1), sim.seed)
        rep.add("FEEDBACK", lam.describe())
        rep.update(cert.summary())
        if mode == "dynamic":
            rhs = ClosedLoopSystem(sc.system, sc.metric, lam, cert,
                                   alpha_floor=sc.feedback.alpha_floor,
                                   threshold=sc.feedback.threshold)
            y0 = np.concatenate([sim.x0, sim.xh0])
        else:
            rhs = lambda t, x: sc.system.f(x, lam(x))  # noqa: E731
            y0 = sim.x0
    blowup = None
    try:
        trace = integrate(rhs, y0, sim.T, sim.h, sim.record)
    except BlowUpError as exc:
        trace, blowup = exc.trace, str(exc)
    if mode == "jq":
        trace.columns["V"] = ctrl.V(trace.states.T)
    elif mode == "static-only":
        trace.columns["V"] = cert.V(trace.states.T)
    return trace, cert, blowup


def cmd_simulate(sc: Scenario, out_dir) -> tuple[int, Report]:
    """Integrate the scenario's closed loop, monitor it and write CSV + report."""
    rep = Report()
    rep.add("SCENARIO", sc.name)
    rep.add("COMMAND", "simulate")
    sim = sc.simulation
    rep.add("MODE", sc.feedback.mode)
    rep.add("T", sim.T)
    rep.add("H", sim.h)
    rep.add("RECORD_EVERY", sim.record)
    rep.add("X0", _fmt_vec(sim.x0))
    if sc.feedback.mode == "dynamic":
        rep.add("XH0", _fmt_vec(sim.xh0))

    trace, cert, blowup = _run_trace(sc, rep)
    notes = []
    if sc.feedback.mode == "dynamic":
        mr = monitor(trace, cert, threshold=sc.feedback.threshold, tol_V=sim.tol_v, tol_d=sim.tol_d)
        violations, notes = mr.violations, mr.notes
        rep.add("TERMINAL_D2", mr.terminal_d2)
        rep.add("MAX_V_XH", mr.max_V)
    else:
        V = np.asarray(trace.columns["V"])
        violations = _descent_violations(trace, 1e-9 * (1.0 + float(V[0])))
        rep.add("MAX_V", float(V.max()))
    terminal = trace.terminal_norm()
    converged = terminal <= sim.terminal_tol
    rep.add("SAMPLES_RECORDED", len(trace.times))
    rep.add("COMPLETE", str(trace.complete).lower())
    rep.add("TERMINAL_NORM", terminal)
    rep.add("TERMINAL_TOL", sim.terminal_tol)
    rep.add("CONVERGED", str(converged).lower())
    rep.add("VIOLATIONS", len(violations))
    for i, v in enumerate(violations[:MAX_LISTED_VIOLATIONS], start=1):
        rep.add(f"VIOLATION_{i}", str(v))
    for i, note in enumerate(notes, start=1):
        rep.add(f"NOTE_{i}", note)
    if blowup is not None:
        rep.add("BLOWUP", blowup)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{sc.name}.csv"
    write_csv(trace, csv_path)
    rep.add("CSV", csv_path.name)

    if violations:
        code = EXIT_VIOLATION
    elif blowup is not None:
        code = EXIT_RUNTIME
    elif not converged:
        code = EXIT_VIOLATION
    else:
        code = EXIT_OK
    rep.add("EXIT", code)
    return code, rep


def cmd_geodesic(sc: Scenario, x_from, x_to) -> tuple[int, Report]:
    """Distance, log vector and shooting residual between two states."""
    n = sc.system.n
    for name, v in (("--from", x_from), ("--to", x_to)):
        if v.shape != (n,):
            raise UsageError(f"{name} needs {n} comma-separated values")
    G = sc.metric
    res = G.log_map(x_from, x_to)
    back = G.exp_map(x_from, res.v)
    rep = Report()
    rep.add("SCENARIO", sc.name)
    rep.add("COMMAND", "geodesic")
    rep.add("FROM", _fmt_vec(x_from))
    rep.add("TO", _fmt_vec(x_to))
    rep.add("METRIC", "constant" if G.constant else "state-dependent")
    rep.add("DISTANCE", res.distance)
    rep.add("LOG_VECTOR", _fmt_vec(res.v))
    rep.add("GRAD_D2", _fmt_vec(-2.0 * res.v))
    rep.add("RESIDUAL", res.residual)
    rep.add("ITERATIONS", res.iterations)
    rep.add("EXP_LOG_ERROR", float(np.linalg.norm(back - x_to)))
    rep.add("EXIT", EXIT_OK)
    return EXIT_OK, rep


def cmd_selftest() -> tuple[int, Report]:
    from .selftest import run_selftest

    rep = Report()
    rep.add("COMMAND", "selftest")
    results = run_selftest()
    failed = 0
    for name, ok, detail in results:
        rep.add(f"CHECK_{name}", f"{'pass' if ok else 'FAIL'} {detail}")
        failed += not ok
    rep.add("CHECKS", len(results))
    rep.add("FAILED", failed)
    code = EXIT_OK if failed == 0 else EXIT_VIOLATION
    rep.add("EXIT", code)
    return code, rep


# ---------------------------------------------------------------------------
# dispatch


def _run_one(command: str, path: str, opts: dict) -> tuple[int, str]:
    """Run one scenario; returns (exit code, report text). Never raises."""
    ns = argparse.Namespace(**opts)
    try:
        sc = _apply_overrides(load_scenario(path), ns)
        if command == "certify":
            code, rep = cmd_certify(sc)
        elif command == "simulate":
            code, rep = cmd_simulate(sc, ns.out)
        else:
            code, rep = cmd_geodesic(sc, ns.x_from, ns.x_to)
    except UsageError as exc:
        return EXIT_USAGE, f"ERROR: {exc}\nEXIT: {EXIT_USAGE}\n"
    except RUNTIME_ERRORS as exc:
        msg = str(exc).replace("\n", " ")
        return EXIT_RUNTIME, f"SCENARIO: {Path(path).stem}\nERROR: {msg}\nEXIT: {EXIT_RUNTIME}\n"
    text = rep.text()
    if command != "geodesic" and ns.out is not None:
        out = Path(ns.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{Path(path).stem}.{command}.txt").write_text(text, encoding="utf-8")
    return code, text


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wcstab", description="Certify and simulate dynamic stabilizers "
                "for weakly contractive control systems.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, sim: bool):
        sp.add_argument("scenarios", nargs="+", metavar="SCENARIO", help="scenario file(s)")
        sp.add_argument("--out", metavar="DIR", default="." if sim else None,
                        help="output directory for reports and CSV traces")
        sp.add_argument("--seed", type=int, help="override the sampling seed")
        sp.add_argument("--samples", type=int, help="override the certification sample count")
        sp.add_argument("--jobs", type=int, default=1, help="run scenarios in N processes")

    c = sub.add_parser("certify", help="sampled weak-contraction check and local certificate")
    common(c, sim=False)
    s = sub.add_parser("simulate", help="simulate the closed loop and monitor its invariants")
    common(s, sim=True)
    s.add_argument("--h", type=float, help="override the RK4 step")
    s.add_argument("--T", type=float, help="override the horizon")
    g = sub.add_parser("geodesic", help="distance and log map between two states")
    g.add_argument("scenarios", nargs=1, metavar="SCENARIO")
    g.add_argument("--from", dest="x_from", type=_vector_arg, required=True)
    g.add_argument("--to", dest="x_to", type=_vector_arg, required=True)
    g.add_argument("--out", metavar="DIR", default=None)
    sub.add_parser("selftest", help="run the built-in oracle checks")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "selftest":
        code, rep = cmd_selftest()
        sys.stdout.write(rep.text())
        return code
    jobs = getattr(args, "jobs", 1)
    if jobs < 1:
        parser.print_usage(sys.stderr)
        sys.stderr.write("wcstab: error: --jobs must be >= 1\n")
        return EXIT_USAGE
    opts = {k: v for k, v in vars(args).items() if k not in ("scenarios", "command", "jobs")}
    paths = args.scenarios
    if jobs > 1 and len(paths) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, [args.command] * len(paths), paths,
                                    [opts] * len(paths)))
    else:
        results = [_run_one(args.command, p, opts) for p in paths]
    for i, (_, text) in enumerate(results):
        if i:
            sys.stdout.write("\n")
        sys.stdout.write(text)
    return max(code for code, _ in results)


if __name__ == "__main__":
    sys.exit(main())
