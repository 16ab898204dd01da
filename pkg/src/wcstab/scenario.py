"""Scenario files: ``[section]`` headers, ``key = value`` lines, ``#`` comments.

Expressions are raw DSL strings; vectors are comma-separated lists. See the
README for the full key list.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exprdsl import ExprError, parse_expr
from .geometry import MetricError, MetricField
from .system import SystemSpec, SystemSpecError

MODES = ("dynamic", "jq", "static-only")

# allowed keys per section (patterns ending in '#' take a 1-based index)
_KEYS = {
    "system": {"n", "m", "f#", "u_lo", "u_hi"},
    "metric": {"G", "g#"},
    "feedback": {"mode", "lambda", "lambda#", "q", "r", "gamma", "threshold", "alpha_floor"},
    "simulation": {"x0", "xh0", "T", "h", "record", "seed", "terminal_tol", "tol_v", "tol_d"},
    "certification": {"state_lo", "state_hi", "control_lo", "control_hi", "samples",
                      "tolerance", "seed"},
}
_REQUIRED_SECTIONS = ("system", "metric")


class ScenarioError(ValueError):
    def __init__(self, msg: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line else f"{path}: "
        super().__init__(where + msg)
        self.line = line


@dataclass
class FeedbackConfig:
    mode: str = "dynamic"
    source: str = "auto-lqr"  # or "expressions"
    exprs: tuple = ()
    q: float = 1.0
    r: float = 1.0
    gamma: float = 0.5
    threshold: float = 1.0
    alpha_floor: float = 0.0


@dataclass
class SimulationConfig:
    x0: np.ndarray
    xh0: np.ndarray
    T: float = 60.0
    h: float = 1e-3
    record: int = 10
    seed: int = 0
    terminal_tol: float = 1e-3
    tol_v: float | None = None  # monitor overrides; None keeps the defaults
    tol_d: float | None = None


@dataclass
class CertificationConfig:
    state_lo: np.ndarray
    state_hi: np.ndarray
    control_lo: np.ndarray
    control_hi: np.ndarray
    samples: int = 1000
    tolerance: float = 1e-8
    seed: int = 0


@dataclass
class Scenario:
    path: str
    system: SystemSpec
    metric: MetricField
    feedback: FeedbackConfig
    simulation: SimulationConfig
    certification: CertificationConfig
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def name(self) -> str:
        return Path(self.path).stem


def _key_pattern(key: str) -> str:
    stripped = key.rstrip("0123456789")
    if stripped != key and stripped:
        return stripped + "#"
    return key


def read_sections(text: str, path="<string>") -> dict:
    """Raw parse: {section: {key: (value, line)}} with section line numbers."""
    sections: dict = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ScenarioError(f"malformed section header {line!r}", path, lineno)
            name = line[1:-1].strip()
            if name not in _KEYS:
                raise ScenarioError(f"unknown section [{name}]", path, lineno)
            if name in sections:
                raise ScenarioError(f"duplicate section [{name}]", path, lineno)
            sections[name] = {"__line__": lineno}
            current = name
            continue
        if "=" not in line:
            raise ScenarioError(f"expected 'key = value', got {line!r}", path, lineno)
        if current is None:
            raise ScenarioError("key outside of any section", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if _key_pattern(key) not in _KEYS[current] and key not in _KEYS[current]:
            raise ScenarioError(f"unknown key {key!r} in [{current}]", path, lineno)
        if key in sections[current]:
            raise ScenarioError(f"duplicate key {key!r} in [{current}]", path, lineno)
        if value == "":
            raise ScenarioError(f"empty value for {key!r}", path, lineno)
        sections[current][key] = (value, lineno)
    for name in _REQUIRED_SECTIONS:
        if name not in sections:
            raise ScenarioError(f"missing [{name}] section", path)
    return sections


class _Section:
    def __init__(self, name, entries, path):
        self.name = name
        entries = dict(entries or {})
        self.line = entries.pop("__line__", None)
        self.entries = entries
        self.path = path

    def has(self, key):
        return key in self.entries

    def raw(self, key):
        return self.entries[key]

    def err(self, msg, key=None):
        line = self.entries[key][1] if key in self.entries else self.line
        return ScenarioError(f"[{self.name}] {msg}", self.path, line)

    def get(self, key, conv, default=None, required=False):
        if key not in self.entries:
            if required:
                raise self.err(f"missing required key {key!r}")
            return default
        value, line = self.entries[key]
        try:
            return conv(value)
        except (ValueError, TypeError) as exc:
            raise ScenarioError(f"[{self.name}] bad value for {key!r}: {exc}", self.path, line) from None

    def indexed(self, prefix):
        out = {}
        for k, (v, line) in self.entries.items():
            if k.startswith(prefix) and k[len(prefix):].isdigit():
                out[int(k[len(prefix):])] = (v, line)
        return out


def _float(s: str) -> float:
    v = float(s)
    if math.isnan(v):
        raise ValueError("NaN not allowed")
    return v


def _int(s: str) -> int:
    return int(s)


def _vector(s: str) -> np.ndarray:
    return np.array([_float(p) for p in s.split(",")], dtype=float)


def _vec_dim(sec, key, dim, default):
    v = sec.get(key, _vector, None)
    if v is None:
        return np.full(dim, default, dtype=float)
    if len(v) == 1:
        return np.full(dim, v[0])
    if len(v) != dim:
        raise sec.err(f"{key!r} has {len(v)} entries, expected {dim}", key)
    return v


def _parse_exprs(sec, prefix, count, n, m, what):
    found = sec.indexed(prefix)
    for idx, (_, line) in found.items():
        if not 1 <= idx <= count:
            raise ScenarioError(f"[{sec.name}] {prefix}{idx} out of range (expected 1..{count})",
                                sec.path, line)
    exprs = []
    for i in range(1, count + 1):
        if i not in found:
            raise sec.err(f"missing {what} component {prefix}{i}")
        src, line = found[i]
        try:
            exprs.append(parse_expr(src, n, m))
        except ExprError as exc:
            raise ScenarioError(f"[{sec.name}] {prefix}{i}: {exc}", sec.path, line) from None
    return exprs


def parse_scenario(text: str, path="<string>") -> Scenario:
    secs = read_sections(text, path)
    S = {name: _Section(name, secs.get(name), path) for name in _KEYS}

    sysx = S["system"]
    n = sysx.get("n", _int, required=True)
    m = sysx.get("m", _int, 0)
    if n < 1 or m < 0:
        raise sysx.err("dimensions must satisfy n >= 1, m >= 0")
    f_exprs = _parse_exprs(sysx, "f", n, n, m, "vector-field")
    u_lo = _vec_dim(sysx, "u_lo", m, -np.inf)
    u_hi = _vec_dim(sysx, "u_hi", m, np.inf)
    try:
        system = SystemSpec(n, m, tuple(f_exprs), u_lo, u_hi)
    except (SystemSpecError, ExprError) as exc:
        raise sysx.err(str(exc)) from None

    met = S["metric"]
    if met.has("G"):
        if met.indexed("g"):
            raise met.err("give either G = identity or gij entries, not both", "G")
        if met.raw("G")[0].lower() != "identity":
            raise met.err("G must be 'identity' (or give gij entries)", "G")
        metric = MetricField.identity(n)
    else:
        entries = [[None] * n for _ in range(n)]
        for key, (src, line) in met.entries.items():
            ij = key[1:]
            if len(ij) != 2 or not ij.isdigit() or not (1 <= int(ij[0]) <= n and 1 <= int(ij[1]) <= n):
                raise ScenarioError(f"[metric] bad entry key {key!r} (use g<i><j>, n <= 9)", path, line)
            i, j = int(ij[0]) - 1, int(ij[1]) - 1
            try:
                entries[i][j] = parse_expr(src, n, 0)
            except ExprError as exc:
                raise ScenarioError(f"[metric] {key}: {exc}", path, line) from None
        for i in range(n):
            for j in range(n):
                if entries[i][j] is None:
                    if entries[j][i] is None:
                        raise met.err(f"missing metric entry g{i + 1}{j + 1}")
                    entries[i][j] = entries[j][i]
        try:
            metric = MetricField(entries)
        except (MetricError, ExprError) as exc:
            raise met.err(str(exc)) from None

    fb = S["feedback"]
    mode = fb.get("mode", str, "dynamic")
    if mode not in MODES:
        raise fb.err(f"mode must be one of {', '.join(MODES)}", "mode")
    lam_exprs = ()
    source = fb.get("lambda", str, None)
    if fb.indexed("lambda"):
        if source not in (None, "expressions"):
            raise fb.err("lambda<j> entries require lambda = expressions (or omit it)", "lambda")
        lam_exprs = tuple(_parse_exprs(fb, "lambda", m, n, 0, "feedback"))
        source = "expressions"
    elif source is None:
        source = "auto-lqr"
    elif source != "auto-lqr":
        raise fb.err("lambda must be auto-lqr or expressions", "lambda")
    feedback = FeedbackConfig(
        mode=mode, source=source, exprs=lam_exprs,
        q=fb.get("q", _float, 1.0), r=fb.get("r", _float, 1.0),
        gamma=fb.get("gamma", _float, 0.5), threshold=fb.get("threshold", _float, 1.0),
        alpha_floor=fb.get("alpha_floor", _float, 0.0))
    if feedback.q <= 0 or feedback.r <= 0:
        raise fb.err("LQR weights q, r must be positive")

    sim = S["simulation"]
    x0 = _vec_dim(sim, "x0", n, 0.0) if sim.has("x0") else np.zeros(n)
    xh0 = _vec_dim(sim, "xh0", n, 0.0) if sim.has("xh0") else np.zeros(n)
    simulation = SimulationConfig(
        x0=x0, xh0=xh0, T=sim.get("T", _float, 60.0), h=sim.get("h", _float, 1e-3),
        record=sim.get("record", _int, 10), seed=sim.get("seed", _int, 0),
        terminal_tol=sim.get("terminal_tol", _float, 1e-3),
        tol_v=sim.get("tol_v", _float, None), tol_d=sim.get("tol_d", _float, None))
    if simulation.T <= 0 or simulation.h <= 0 or simulation.record < 1:
        raise sim.err("need T > 0, h > 0, record >= 1")

    cer = S["certification"]
    certification = CertificationConfig(
        state_lo=_vec_dim(cer, "state_lo", n, -1.0), state_hi=_vec_dim(cer, "state_hi", n, 1.0),
        control_lo=_vec_dim(cer, "control_lo", m, -1.0), control_hi=_vec_dim(cer, "control_hi", m, 1.0),
        samples=cer.get("samples", _int, 1000), tolerance=cer.get("tolerance", _float, 1e-8),
        seed=cer.get("seed", _int, 0))
    if np.any(certification.state_hi < certification.state_lo) or \
            np.any(certification.control_hi < certification.control_lo):
        raise cer.err("box bounds must satisfy lo <= hi")
    # sampled controls must lie in the admissible box
    certification.control_lo = np.maximum(certification.control_lo, np.nextafter(system.u_lo, 0.0))
    certification.control_hi = np.minimum(certification.control_hi, np.nextafter(system.u_hi, 0.0))

    return Scenario(str(path), system, metric, feedback, simulation, certification, secs)


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc.strerror}", path) from None
    return parse_scenario(text, path)
