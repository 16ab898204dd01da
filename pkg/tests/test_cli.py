from __future__ import annotations

import subprocess
import sys

import pytest

from conftest import scenario_path
from wcstab.cli import main


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def keys(text):
    return dict(line.split(": ", 1) for line in text.splitlines() if ": " in line)


def write(tmp_path, body, name="s.scn"):
    p = tmp_path / name
    p.write_text(body)
    return str(p)


UNSTABLE_LAMBDA = """\
[system]
n = 2
m = 1
f1 = x2
f2 = -x1 + u1

[metric]
G = identity

[feedback]
lambda1 = 0*x1
"""


# -- exit code 0 --------------------------------------------------------------------

def test_certify_oscillator_passes(capsys):
    code, out, _ = run(["certify", scenario_path("oscillator")], capsys)
    rep = keys(out)
    assert code == 0
    assert rep["CONTRACTION_VERDICT"] == "pass"
    assert rep["CERT_RSTAR"] == "inf" and rep["EXIT"] == "0"


def test_certify_report_is_reproducible(capsys):
    a = run(["certify", scenario_path("pullback"), "--seed", "4", "--samples", "50"], capsys)
    b = run(["certify", scenario_path("pullback"), "--seed", "4", "--samples", "50"], capsys)
    assert a == b
    assert keys(a[1])["CONTRACTION_SAMPLES"] == str(50 + 1 + 8)


def test_simulate_jq_writes_outputs(tmp_path, capsys):
    code, out, _ = run(["simulate", scenario_path("bilinear_jq"), "--out", str(tmp_path)], capsys)
    assert code == 0
    rep = keys(out)
    assert float(rep["TERMINAL_NORM"]) <= 1e-3 and rep["VIOLATIONS"] == "0"
    assert (tmp_path / "bilinear_jq.csv").exists()
    assert (tmp_path / "bilinear_jq.simulate.txt").read_text() == out


def test_simulate_from_origin_stays_at_origin(tmp_path, capsys):
    body = UNSTABLE_LAMBDA.replace("lambda1 = 0*x1", "q = 1") + \
        "\n[simulation]\nx0 = 0, 0\nxh0 = 0, 0\nT = 1\nh = 0.01\nrecord = 1\n"
    code, out, _ = run(["simulate", write(tmp_path, body), "--out", str(tmp_path)], capsys)
    assert code == 0
    assert float(keys(out)["TERMINAL_NORM"]) == 0.0


def test_csv_is_bit_identical_across_runs(tmp_path, capsys):
    reports = [run(["simulate", scenario_path("bilinear_jq"), "--out", str(tmp_path / d),
                    "--T", "5"], capsys) for d in ("a", "b")]
    assert reports[0][0] == reports[1][0]
    assert (tmp_path / "a" / "bilinear_jq.csv").read_bytes() == \
        (tmp_path / "b" / "bilinear_jq.csv").read_bytes()


def test_geodesic_constant_metric(capsys):
    code, out, _ = run(["geodesic", scenario_path("oscillator"), "--from", "0,0", "--to", "3,4"],
                       capsys)
    rep = keys(out)
    assert code == 0 and float(rep["DISTANCE"]) == 5.0
    assert rep["LOG_VECTOR"] == "3.0,4.0" and rep["GRAD_D2"] == "-6.0,-8.0"


def test_geodesic_pullback_oracle(capsys):
    code, out, _ = run(["geodesic", scenario_path("pullback"), "--from", "0,0", "--to", "1,1"],
                       capsys)
    rep = keys(out)
    assert code == 0
    assert abs(float(rep["DISTANCE"]) - 5 ** 0.5) <= 1e-6
    v = [float(a) for a in rep["LOG_VECTOR"].split(",")]
    assert abs(v[0] - 1) <= 1e-6 and abs(v[1] - 2) <= 1e-6
    assert float(rep["RESIDUAL"]) <= 1e-8


def test_geodesic_identical_endpoints(capsys):
    code, out, _ = run(["geodesic", scenario_path("pullback"), "--from", "0.3,0.2",
                        "--to", "0.3,0.2"], capsys)
    assert code == 0 and float(keys(out)["DISTANCE"]) == 0.0


def test_selftest(capsys):
    code, out, _ = run(["selftest"], capsys)
    assert code == 0 and keys(out)["FAILED"] == "0"


def test_jobs_match_sequential(capsys):
    paths = [scenario_path("oscillator"), scenario_path("expanding")]
    seq = run(["certify", *paths, "--samples", "20"], capsys)
    par = run(["certify", *paths, "--samples", "20", "--jobs", "2"], capsys)
    assert seq == par
    assert seq[0] == 3  # the worst exit code wins


# -- exit code 1: usage -------------------------------------------------------------------

@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["certify"],
    ["certify", "x.scn", "--bogus"],
    ["certify", "x.scn", "--seed", "abc"],
    ["geodesic", "x.scn", "--from", "0,0"],
    ["geodesic", "x.scn", "--from", "a,b", "--to", "0,0"],
    ["certify", "x.scn", "--jobs", "0"],
])
def test_usage_errors(argv, capsys):
    code, _, err = run(argv, capsys)
    assert code == 1
    assert "usage" in err or "error" in err


def test_geodesic_wrong_dimension_is_usage_error(capsys):
    code, out, _ = run(["geodesic", scenario_path("oscillator"), "--from", "0,0,0",
                        "--to", "1,1,1"], capsys)
    assert code == 1 and "--from" in out


# -- exit code 2: runtime / validation -----------------------------------------------------

def test_missing_file(tmp_path, capsys):
    code, out, _ = run(["certify", str(tmp_path / "nope.scn")], capsys)
    assert code == 2 and "cannot read" in out


def test_invalid_scenario(tmp_path, capsys):
    body = UNSTABLE_LAMBDA.replace("f1 = x2", "f1 = x1 + 1")
    code, out, _ = run(["certify", write(tmp_path, body)], capsys)
    assert code == 2 and "f(0,0) ≠ 0" in out


def test_certificate_failure(tmp_path, capsys):
    code, out, _ = run(["certify", write(tmp_path, UNSTABLE_LAMBDA)], capsys)
    rep = keys(out)
    assert code == 2
    assert rep["CONTRACTION_VERDICT"] == "pass" and rep["CERT_STATUS"] == "error"


def test_simulate_certificate_failure(tmp_path, capsys):
    code, out, _ = run(["simulate", write(tmp_path, UNSTABLE_LAMBDA), "--out", str(tmp_path)],
                       capsys)
    assert code == 2 and "Hurwitz" in out


def test_geodesic_outside_metric_domain(tmp_path, capsys):
    body = UNSTABLE_LAMBDA.replace("G = identity", "g11 = 1 - x1\ng12 = 0\ng22 = 1")
    code, out, _ = run(["geodesic", write(tmp_path, body), "--from", "0,0", "--to", "3,0"], capsys)
    assert code == 2 and "ERROR" in out


def test_bad_override(capsys):
    code, _, _ = run(["simulate", scenario_path("bilinear_jq"), "--h", "-1"], capsys)
    assert code == 2


# -- exit code 3: invariant violation -----------------------------------------------------

def test_certify_expanding_fails_with_witness(capsys):
    code, out, _ = run(["certify", scenario_path("expanding")], capsys)
    rep = keys(out)
    assert code == 3
    assert rep["CONTRACTION_VERDICT"] == "fail" and float(rep["CONTRACTION_MAX_EIG"]) == 2.0


def test_simulate_expanding_is_a_violation(tmp_path, capsys):
    code, out, _ = run(["simulate", scenario_path("expanding"), "--out", str(tmp_path), "--T", "1"],
                       capsys)
    rep = keys(out)
    assert code == 3
    assert int(rep["VIOLATIONS"]) > 0
    assert rep["VIOLATION_1"].startswith("monotonicity at t=0 (index 0)")


def test_simulate_not_converged_is_a_violation(tmp_path, capsys):
    code, out, _ = run(["simulate", scenario_path("oscillator"), "--out", str(tmp_path),
                        "--T", "1", "--h", "0.01"], capsys)
    assert code == 3 and keys(out)["CONVERGED"] == "false"


def test_blow_up_with_violations_exits_3(tmp_path, capsys):
    body = """\
[system]
n = 1
m = 1
f1 = x1^3 + u1

[metric]
G = identity

[simulation]
x0 = 3
xh0 = 0
T = 2
h = 0.001
record = 1
"""
    code, out, _ = run(["simulate", write(tmp_path, body), "--out", str(tmp_path)], capsys)
    rep = keys(out)
    assert code == 3
    assert "BLOWUP" in rep and rep["COMPLETE"] == "false"


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "wcstab.cli", "geodesic",
                           scenario_path("oscillator"), "--from", "0,0", "--to", "0,2"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "DISTANCE: 2.0" in proc.stdout
