"""Scalar expression language over state variables x1..xn and controls u1..um.

Grammar (lowest to highest precedence, all binary operators left-associative)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('-' | '+') unary | power
    power  := atom ('^' atom)*
    atom   := NUMBER | x<i> | u<j> | FUNC '(' expr ')' | '(' expr ')'

with FUNC one of sin, cos, tanh, exp, sqrt. So ``-x2^2`` is ``-(x2^2)`` and
``2^3^2`` is ``(2^3)^2``.

Expressions evaluate on floats, numpy arrays (elementwise, used for batched
simulation) and :class:`Dual` numbers (forward-mode differentiation).
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

FUNCTIONS = ("sin", "cos", "tanh", "exp", "sqrt")


class ExprError(Exception):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, msg: str, offset: int, src: str):
        super().__init__(f"{msg} at byte offset {offset}: {src!r}")
        self.offset = offset
        self.src = src


class EvalError(ExprError):
    """Domain error, NaN or non-differentiable point during evaluation."""

    def __init__(self, msg: str, subexpr: str | None = None):
        if subexpr is not None:
            msg = f"{msg} in subexpression '{subexpr}'"
        super().__init__(msg)
        self.subexpr = subexpr


# ---------------------------------------------------------------------------
# Dual numbers


class Dual:
    """First-order dual number ``val + der*eps``."""

    __slots__ = ("val", "der")
    __array_ufunc__ = None  # make ndarray op Dual defer to Dual's reflected ops

    def __init__(self, val, der=0.0):
        self.val = val
        self.der = der

    def __add__(self, o):
        if isinstance(o, Dual):
            return Dual(self.val + o.val, self.der + o.der)
        return Dual(self.val + o, self.der)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, Dual):
            return Dual(self.val - o.val, self.der - o.der)
        return Dual(self.val - o, self.der)

    def __rsub__(self, o):
        return Dual(o - self.val, -self.der)

    def __neg__(self):
        return Dual(-self.val, -self.der)

    def __mul__(self, o):
        if isinstance(o, Dual):
            return Dual(self.val * o.val, self.val * o.der + self.der * o.val)
        return Dual(self.val * o, self.der * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Dual):
            return Dual(self.val / o.val, (self.der * o.val - self.val * o.der) / (o.val * o.val))
        return Dual(self.val / o, self.der / o)

    def __rtruediv__(self, o):
        return Dual(o / self.val, -o * self.der / (self.val * self.val))

    def __repr__(self):
        return f"Dual({self.val!r}, {self.der!r})"


def _val(a):
    return a.val if isinstance(a, Dual) else a


def _der(a):
    return a.der if isinstance(a, Dual) else 0.0


def _is_array(a) -> bool:
    return isinstance(_val(a), np.ndarray)


def _elementary(fm, fn, dfn):
    # fm: math version, fn: numpy version, dfn(value, result) -> derivative factor
    def apply(a):
        v = _val(a)
        if isinstance(v, np.ndarray):
            r = fn(v)
        else:
            r = fm(v)
        if isinstance(a, Dual):
            return Dual(r, dfn(v, r) * a.der)
        return r
    return apply


def _cosh2(v, r):
    return 1.0 - r * r


_FUNC_IMPL = {
    "sin": _elementary(math.sin, np.sin, lambda v, r: np.cos(v) if isinstance(v, np.ndarray) else math.cos(v)),
    "cos": _elementary(math.cos, np.cos, lambda v, r: -np.sin(v) if isinstance(v, np.ndarray) else -math.sin(v)),
    "tanh": _elementary(math.tanh, np.tanh, _cosh2),
    "exp": _elementary(math.exp, np.exp, lambda v, r: r),
}


def _exp_safe(a):
    v = _val(a)
    if np.any(np.asarray(v) > 709.0):
        raise OverflowError
    return _FUNC_IMPL["exp"](a)


# ---------------------------------------------------------------------------
# AST


class Node:
    """Base expression node. Subclasses are frozen dataclasses."""

    _prec = 100

    def eval(self, x: Sequence = (), u: Sequence = ()):
        """Evaluate at (x, u); raises EvalError on domain errors or NaN."""
        try:
            r = self.compiled(x, u)
        except EvalError:
            raise
        except ZeroDivisionError:
            raise EvalError("division by zero", str(self)) from None
        except OverflowError:
            raise EvalError("overflow", str(self)) from None
        if np.any(np.isnan(np.asarray(_val(r)))):
            raise EvalError("NaN produced", str(self))
        return r

    @cached_property
    def compiled(self) -> Callable:
        return self._compile()

    def _compile(self) -> Callable:  # pragma: no cover - abstract
        raise NotImplementedError

    def walk(self):
        yield self

    @property
    def is_constant(self) -> bool:
        return not any(isinstance(n, Var) for n in self.walk())

    def __str__(self) -> str:
        return to_source(self)


@dataclass(frozen=True)
class Const(Node):
    value: float

    def _compile(self):
        v = self.value
        return lambda x, u: v


@dataclass(frozen=True)
class Var(Node):
    kind: str  # "x" or "u"
    index: int  # 1-based

    def _compile(self):
        i = self.index - 1
        if self.kind == "x":
            return lambda x, u: x[i]
        return lambda x, u: u[i]


@dataclass(frozen=True)
class Neg(Node):
    operand: Node
    _prec = 3

    def walk(self):
        yield self
        yield from self.operand.walk()

    def _compile(self):
        f = self.operand.compiled
        return lambda x, u: -f(x, u)


@dataclass(frozen=True)
class BinOp(Node):
    op: str
    left: Node
    right: Node

    @property
    def _prec(self):
        return _BIN_PREC[self.op]

    def walk(self):
        yield self
        yield from self.left.walk()
        yield from self.right.walk()

    def _compile(self):
        a, b = self.left.compiled, self.right.compiled
        op = self.op
        if op == "+":
            return lambda x, u: a(x, u) + b(x, u)
        if op == "-":
            return lambda x, u: a(x, u) - b(x, u)
        if op == "*":
            return lambda x, u: a(x, u) * b(x, u)
        if op == "/":
            text = str(self)

            def div(x, u):
                d = b(x, u)
                if np.any(np.asarray(_val(d)) == 0.0):
                    raise EvalError("division by zero", text)
                return a(x, u) / d
            return div
        return self._compile_pow()

    def _compile_pow(self):
        a, b = self.left.compiled, self.right.compiled
        text = str(self)
        if isinstance(self.right, Const) and float(self.right.value).is_integer():
            k = int(self.right.value)

            def ipow(x, u):
                base = a(x, u)
                v = _val(base)
                if k < 0 and np.any(np.asarray(v) == 0.0):
                    raise EvalError("zero raised to a negative power", text)
                r = v ** k
                if isinstance(base, Dual):
                    dr = k * v ** (k - 1) if k != 0 else 0.0 * v
                    return Dual(r, dr * base.der)
                return r
            return ipow

        def gpow(x, u):
            base, ex = a(x, u), b(x, u)
            v, e = _val(base), _val(ex)
            if np.any(np.asarray(v) <= 0.0):
                raise EvalError("non-positive base with non-integer exponent", text)
            if isinstance(v, np.ndarray) or isinstance(e, np.ndarray):
                r = np.power(v, e)
                lg = np.log(v)
            else:
                r = math.pow(v, e)
                lg = math.log(v)
            if isinstance(base, Dual) or isinstance(ex, Dual):
                return Dual(r, e * v ** (e - 1) * _der(base) + r * lg * _der(ex))
            return r
        return gpow


@dataclass(frozen=True)
class Call(Node):
    name: str
    arg: Node

    def walk(self):
        yield self
        yield from self.arg.walk()

    def _compile(self):
        f = self.arg.compiled
        if self.name == "sqrt":
            text = str(self)

            def sqrt(x, u):
                a = f(x, u)
                v = _val(a)
                arr = isinstance(v, np.ndarray)
                if np.any(np.asarray(v) < 0.0):
                    raise EvalError("sqrt of negative value", text)
                r = np.sqrt(v) if arr else math.sqrt(v)
                if isinstance(a, Dual):
                    if np.any(np.asarray(r) == 0.0) and np.any(np.asarray(a.der) != 0.0):
                        raise EvalError("non-differentiable point (sqrt at 0)", text)
                    safe = np.where(r == 0.0, 1.0, r) if arr else (r or 1.0)
                    return Dual(r, 0.5 * a.der / safe)
                return r
            return sqrt
        if self.name == "exp":
            return lambda x, u: _exp_safe(f(x, u))
        g = _FUNC_IMPL[self.name]
        return lambda x, u: g(f(x, u))


_BIN_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


# ---------------------------------------------------------------------------
# Printing


def _fmt_const(v: float) -> str:
    s = repr(float(v))
    return s[:-2] if s.endswith(".0") else s


def to_source(node: Node) -> str:
    """Render with the minimal parentheses that re-parse to the same tree."""
    if isinstance(node, Const):
        return _fmt_const(node.value)
    if isinstance(node, Var):
        return f"{node.kind}{node.index}"
    if isinstance(node, Call):
        return f"{node.name}({to_source(node.arg)})"
    if isinstance(node, Neg):
        inner = to_source(node.operand)
        if node.operand._prec < Neg._prec:
            inner = f"({inner})"
        return "-" + inner
    if isinstance(node, BinOp):
        p = node._prec
        ls, rs = to_source(node.left), to_source(node.right)
        # left-assoc: the left child may share the precedence, the right may not
        if node.left._prec < p or (node.op == "^" and isinstance(node.left, Neg)):
            ls = f"({ls})"
        if node.right._prec <= p or isinstance(node.right, Neg):
            rs = f"({rs})"
        return f"{ls}{node.op}{rs}" if node.op in "*/^" else f"{ls} {node.op} {rs}"
    raise TypeError(node)


# ---------------------------------------------------------------------------
# Parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)
_VAR = re.compile(r"([xu])([1-9]\d*)$")


def _tokenize(src: str):
    toks = []
    pos = 0
    while pos < len(src):
        if src[pos:].strip() == "":
            break
        m = _TOKEN.match(src, pos)
        if m is None or m.end() == pos:
            off = pos + (len(src[pos:]) - len(src[pos:].lstrip()))
            raise ExprSyntaxError(f"unexpected character {src[off]!r}", off, src)
        kind = m.lastgroup
        start = m.start(kind)
        toks.append((kind, m.group(kind), start))
        pos = m.end()
    toks.append(("end", "", len(src)))
    return toks


class _Parser:
    def __init__(self, src: str, n: int, m: int):
        self.src, self.n, self.m = src, n, m
        self.toks = _tokenize(src)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self):
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, val):
        t = self.take()
        if t[1] != val:
            raise ExprSyntaxError(f"expected {val!r}, found {t[1] or 'end of input'!r}", t[2], self.src)

    def parse(self) -> Node:
        node = self.expr()
        t = self.peek()
        if t[0] != "end":
            raise ExprSyntaxError(f"unexpected token {t[1]!r}", t[2], self.src)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        t = self.peek()
        if t[0] == "op" and t[1] == "-":
            self.take()
            return Neg(self.unary())
        if t[0] == "op" and t[1] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        node = self.atom()
        while self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            node = BinOp("^", node, self.atom())
        return node

    def atom(self):
        kind, text, off = self.take()
        if kind == "num":
            return Const(float(text))
        if kind == "name":
            vm = _VAR.match(text)
            if vm:
                idx = int(vm.group(2))
                lim = self.n if vm.group(1) == "x" else self.m
                if idx > lim:
                    raise ExprSyntaxError(
                        f"variable {text} index out of range (dimension {lim})", off, self.src)
                return Var(vm.group(1), idx)
            if text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(text, arg)
            raise ExprSyntaxError(f"unknown identifier {text!r}", off, self.src)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ExprSyntaxError(f"unexpected {text or 'end of input'!r}", off, self.src)


def parse_expr(src: str, n: int, m: int) -> Node:
    if not src or not src.strip():
        raise ExprSyntaxError("empty expression", 0, src)
    return _Parser(src, n, m).parse()


# ---------------------------------------------------------------------------
# Differentiation


def evaluate_vector(exprs: Sequence[Node], x, u=()) -> np.ndarray:
    """Evaluate a list of expressions; broadcasts when x/u hold batches."""
    vals = [e.eval(x, u) for e in exprs]
    if any(isinstance(v, np.ndarray) and v.ndim > 0 for v in vals):
        return np.stack(np.broadcast_arrays(*[np.asarray(v, dtype=float) for v in vals]))
    return np.array(vals, dtype=float)


def jacobian(exprs: Sequence[Node], x, u=(), wrt: str = "state") -> np.ndarray:
    """Exact Jacobian of ``exprs`` w.r.t. x (``wrt="state"``) or u (``"control"``).

    One forward dual-number pass per column.
    """
    x = [float(v) for v in x]
    u = [float(v) for v in u]
    seeds = x if wrt == "state" else u
    if wrt not in ("state", "control"):
        raise ValueError(f"wrt must be 'state' or 'control', got {wrt!r}")
    out = np.zeros((len(exprs), len(seeds)))
    for j in range(len(seeds)):
        if wrt == "state":
            xd = [Dual(v, 1.0 if i == j else 0.0) for i, v in enumerate(x)]
            ud = u
        else:
            xd = x
            ud = [Dual(v, 1.0 if i == j else 0.0) for i, v in enumerate(u)]
        for r, e in enumerate(exprs):
            out[r, j] = _der(e.eval(xd, ud))
    return out


def directional_derivative(exprs: Sequence[Node], x, v, u=()) -> np.ndarray:
    """d/ds exprs(x + s v) at s=0, in a single dual pass."""
    xd = [Dual(float(a), float(b)) for a, b in zip(x, v)]
    return np.array([_der(e.eval(xd, [float(w) for w in u])) for e in exprs], dtype=float)
