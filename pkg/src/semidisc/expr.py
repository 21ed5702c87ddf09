"""Scalar expression trees with exact symbolic differentiation.

The grammar covers what the model ingredients need: +, -, *, /, unary minus,
constant powers via ^ (right associative, binds tightest), the functions
sin/cos/exp/sqrt, and the named constant pi.  All derivative blocks used by
the assembly code are produced symbolically from these trees, so no numerical
differentiation noise enters the dynamics.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ParseError, UnboundVariable

__all__ = [
    "Expr", "Constant", "Variable", "Neg", "Add", "Sub", "Mul", "Div",
    "Pow", "Call", "parse_expression", "render", "evaluate",
    "evaluate_many", "differentiate", "simplify", "substitute", "variables",
]

_IDENT_RE = re.compile(r"[a-zA-Z_][a-zA-Z0-9_]*")
_NUMBER_RE = re.compile(r"\d+(?:\.\d+)?(?:[eE][+-]?\d+)?")

FUNCTIONS = ("sin", "cos", "exp", "sqrt")


class Expr:
    """Base class for expression nodes.  Instances are immutable."""

    __slots__ = ()


@dataclass(frozen=True)
class Constant(Expr):
    value: float


@dataclass(frozen=True)
class Variable(Expr):
    name: str

    def __post_init__(self):
        if not _IDENT_RE.fullmatch(self.name):
            raise ValueError(f"invalid variable name {self.name!r}")
        if self.name == "pi":
            raise ValueError("'pi' is a reserved constant, not a variable")


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True)
class Add(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Sub(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Mul(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Div(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Pow(Expr):
    """base ^ exponent with a numeric exponent (the grammar only admits
    constant exponents, which keeps differentiation a closed operation)."""

    base: Expr
    exponent: float


@dataclass(frozen=True)
class Call(Expr):
    func: str
    arg: Expr

    def __post_init__(self):
        if self.func not in FUNCTIONS:
            raise ValueError(f"unknown function {self.func!r}")


# ---------------------------------------------------------------------------
# parsing

class _Tokenizer:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self):
        self.skip_ws()
        if self.pos >= len(self.text):
            return None
        return self.text[self.pos]


class _Parser:
    """Recursive descent with conventional precedence:
    ^ (tightest, right assoc), unary minus, * /, + - (loosest)."""

    def __init__(self, text: str):
        self.tok = _Tokenizer(text)

    def fail(self, expected: str):
        raise ParseError("syntax error", self.tok.pos, expected)

    def expect_char(self, ch: str):
        if self.tok.peek() != ch:
            self.fail(f"'{ch}'")
        self.tok.pos += 1

    def parse(self) -> Expr:
        e = self.parse_sum()
        if self.tok.peek() is not None:
            self.fail("end of input or operator")
        return e

    def parse_sum(self) -> Expr:
        e = self.parse_term()
        while True:
            c = self.tok.peek()
            if c == "+":
                self.tok.pos += 1
                e = Add(e, self.parse_term())
            elif c == "-":
                self.tok.pos += 1
                e = Sub(e, self.parse_term())
            else:
                return e

    def parse_term(self) -> Expr:
        e = self.parse_unary()
        while True:
            c = self.tok.peek()
            if c == "*":
                self.tok.pos += 1
                e = Mul(e, self.parse_unary())
            elif c == "/":
                self.tok.pos += 1
                e = Div(e, self.parse_unary())
            else:
                return e

    def parse_unary(self) -> Expr:
        if self.tok.peek() == "-":
            self.tok.pos += 1
            arg = self.parse_unary()
            # Fold negated literals so "-3" round-trips as Constant(-3).
            if isinstance(arg, Constant):
                return Constant(-arg.value)
            return Neg(arg)
        return self.parse_power()

    def parse_power(self) -> Expr:
        base = self.parse_atom()
        if self.tok.peek() == "^":
            self.tok.pos += 1
            at = self.tok.pos
            exponent = self.parse_power()
            try:
                value = evaluate(exponent, {})
            except (UnboundVariable, DomainError):
                raise ParseError("syntax error", at, "constant exponent") from None
            return Pow(base, value)
        return base

    def parse_atom(self) -> Expr:
        self.tok.skip_ws()
        text, pos = self.tok.text, self.tok.pos
        if pos >= len(text):
            self.fail("expression")
        c = text[pos]
        if c == "(":
            self.tok.pos += 1
            e = self.parse_sum()
            self.expect_char(")")
            return e
        m = _NUMBER_RE.match(text, pos)
        if m:
            self.tok.pos = m.end()
            return Constant(float(m.group()))
        m = _IDENT_RE.match(text, pos)
        if m:
            name = m.group()
            self.tok.pos = m.end()
            if name == "pi":
                return Constant(math.pi)
            if self.tok.peek() == "(":
                if name not in FUNCTIONS:
                    raise ParseError(f"unknown function {name!r}", pos,
                                     "one of " + ", ".join(FUNCTIONS))
                self.tok.pos += 1
                arg = self.parse_sum()
                self.expect_char(")")
                return Call(name, arg)
            return Variable(name)
        self.fail("expression")


def parse_expression(text: str) -> Expr:
    """Parse expression text into a tree; raises ParseError with the byte
    offset of the first problem."""
    if not text or text.isspace():
        raise ParseError("empty expression", 0, "expression")
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# rendering

# Effective precedence levels for parenthesization decisions.
_PREC_SUM, _PREC_TERM, _PREC_UNARY, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


def _const_text(value: float) -> str:
    if value == int(value) and abs(value) < 1e16:
        return str(int(value))
    return repr(value)


def _prec(e: Expr) -> int:
    if isinstance(e, Constant):
        # Negative literals print with a leading minus, which parses at the
        # unary level; give them that precedence so callers parenthesize.
        return _PREC_UNARY if e.value < 0 else _PREC_ATOM
    if isinstance(e, (Add, Sub)):
        return _PREC_SUM
    if isinstance(e, (Mul, Div)):
        return _PREC_TERM
    if isinstance(e, Neg):
        return _PREC_UNARY
    if isinstance(e, Pow):
        return _PREC_POW
    return _PREC_ATOM


def _render(e: Expr, min_prec: int) -> str:
    if isinstance(e, Constant):
        s = _const_text(e.value)
    elif isinstance(e, Variable):
        s = e.name
    elif isinstance(e, Neg):
        s = "-" + _render(e.arg, _PREC_UNARY)
    elif isinstance(e, Add):
        s = _render(e.left, _PREC_SUM) + "+" + _render(e.right, _PREC_SUM + 1)
    elif isinstance(e, Sub):
        s = _render(e.left, _PREC_SUM) + "-" + _render(e.right, _PREC_SUM + 1)
    elif isinstance(e, Mul):
        s = _render(e.left, _PREC_TERM) + "*" + _render(e.right, _PREC_TERM + 1)
    elif isinstance(e, Div):
        s = _render(e.left, _PREC_TERM) + "/" + _render(e.right, _PREC_TERM + 1)
    elif isinstance(e, Pow):
        exp = _const_text(e.exponent)
        if e.exponent < 0:
            exp = "(" + exp + ")"
        s = _render(e.base, _PREC_ATOM) + "^" + exp
    elif isinstance(e, Call):
        return f"{e.func}({_render(e.arg, 0)})"
    else:
        raise TypeError(f"not an Expr: {e!r}")
    if _prec(e) < min_prec:
        return "(" + s + ")"
    return s


def render(e: Expr) -> str:
    """Text form that re-parses to a structurally identical tree."""
    return _render(e, 0)


# ---------------------------------------------------------------------------
# evaluation

def evaluate(e: Expr, env: dict) -> float:
    """Strict scalar evaluation in IEEE doubles.

    Raises UnboundVariable for names missing from env and DomainError when
    the value leaves the real domain (division by zero, sqrt of a negative,
    fractional power of a negative, overflow).
    """
    if isinstance(e, Constant):
        return e.value
    if isinstance(e, Variable):
        try:
            return float(env[e.name])
        except KeyError:
            raise UnboundVariable(e.name) from None
    if isinstance(e, Neg):
        return -evaluate(e.arg, env)
    if isinstance(e, Add):
        return evaluate(e.left, env) + evaluate(e.right, env)
    if isinstance(e, Sub):
        return evaluate(e.left, env) - evaluate(e.right, env)
    if isinstance(e, Mul):
        return evaluate(e.left, env) * evaluate(e.right, env)
    if isinstance(e, Div):
        num = evaluate(e.left, env)
        den = evaluate(e.right, env)
        if den == 0.0:
            raise DomainError("division by zero")
        return num / den
    if isinstance(e, Pow):
        base = evaluate(e.base, env)
        try:
            return math.pow(base, e.exponent)
        except (ValueError, OverflowError) as err:
            raise DomainError(str(err)) from None
    if isinstance(e, Call):
        x = evaluate(e.arg, env)
        try:
            if e.func == "sin":
                return math.sin(x)
            if e.func == "cos":
                return math.cos(x)
            if e.func == "exp":
                return math.exp(x)
            return math.sqrt(x)
        except (ValueError, OverflowError) as err:
            raise DomainError(str(err)) from None
    raise TypeError(f"not an Expr: {e!r}")


def _eval_array(e: Expr, env: dict):
    if isinstance(e, Constant):
        return e.value
    if isinstance(e, Variable):
        try:
            return env[e.name]
        except KeyError:
            raise UnboundVariable(e.name) from None
    if isinstance(e, Neg):
        return -_eval_array(e.arg, env)
    if isinstance(e, Add):
        return _eval_array(e.left, env) + _eval_array(e.right, env)
    if isinstance(e, Sub):
        return _eval_array(e.left, env) - _eval_array(e.right, env)
    if isinstance(e, Mul):
        return _eval_array(e.left, env) * _eval_array(e.right, env)
    if isinstance(e, Div):
        return _eval_array(e.left, env) / _eval_array(e.right, env)
    if isinstance(e, Pow):
        return np.power(_eval_array(e.base, env), e.exponent)
    if isinstance(e, Call):
        x = _eval_array(e.arg, env)
        return {"sin": np.sin, "cos": np.cos,
                "exp": np.exp, "sqrt": np.sqrt}[e.func](x)
    raise TypeError(f"not an Expr: {e!r}")


def evaluate_many(e: Expr, env: dict):
    """Vectorized evaluation: env values are numpy arrays (or scalars) of a
    common broadcastable shape.  Domain violations anywhere in the batch
    raise DomainError, mirroring the scalar semantics."""
    with np.errstate(divide="raise", invalid="raise", over="raise",
                     under="ignore"):
        try:
            return _eval_array(e, env)
        except FloatingPointError as err:
            raise DomainError(str(err)) from None


# ---------------------------------------------------------------------------
# calculus and rewriting

def differentiate(e: Expr, var: str) -> Expr:
    """Exact symbolic derivative of e with respect to var (simplified)."""
    return simplify(_diff(e, var))


def _diff(e: Expr, var: str) -> Expr:
    if isinstance(e, Constant):
        return Constant(0.0)
    if isinstance(e, Variable):
        return Constant(1.0) if e.name == var else Constant(0.0)
    if isinstance(e, Neg):
        return Neg(_diff(e.arg, var))
    if isinstance(e, Add):
        return Add(_diff(e.left, var), _diff(e.right, var))
    if isinstance(e, Sub):
        return Sub(_diff(e.left, var), _diff(e.right, var))
    if isinstance(e, Mul):
        return Add(Mul(_diff(e.left, var), e.right),
                   Mul(e.left, _diff(e.right, var)))
    if isinstance(e, Div):
        if isinstance(e.right, Constant):
            return Div(_diff(e.left, var), e.right)
        return Div(Sub(Mul(_diff(e.left, var), e.right),
                       Mul(e.left, _diff(e.right, var))),
                   Pow(e.right, 2.0))
    if isinstance(e, Pow):
        if e.exponent == 0.0:
            return Constant(0.0)
        return Mul(Mul(Constant(e.exponent), Pow(e.base, e.exponent - 1.0)),
                   _diff(e.base, var))
    if isinstance(e, Call):
        inner = _diff(e.arg, var)
        if e.func == "sin":
            outer = Call("cos", e.arg)
        elif e.func == "cos":
            outer = Neg(Call("sin", e.arg))
        elif e.func == "exp":
            outer = Call("exp", e.arg)
        else:  # sqrt
            outer = Div(Constant(0.5), Call("sqrt", e.arg))
        return Mul(outer, inner)
    raise TypeError(f"not an Expr: {e!r}")


def _is_const(e: Expr, value=None) -> bool:
    if not isinstance(e, Constant):
        return False
    return value is None or e.value == value


def _rewrite(e: Expr) -> Expr:
    """One local rewrite pass at the root (children assumed simplified)."""
    # Constant folding for any node whose children are all literals.
    children_const = {
        Neg: lambda: _is_const(e.arg),
        Add: lambda: _is_const(e.left) and _is_const(e.right),
        Sub: lambda: _is_const(e.left) and _is_const(e.right),
        Mul: lambda: _is_const(e.left) and _is_const(e.right),
        Div: lambda: _is_const(e.left) and _is_const(e.right),
        Pow: lambda: _is_const(e.base),
        Call: lambda: _is_const(e.arg),
    }.get(type(e))
    if children_const and children_const():
        try:
            return Constant(evaluate(e, {}))
        except DomainError:
            return e

    if isinstance(e, Neg) and isinstance(e.arg, Neg):
        return e.arg.arg
    if isinstance(e, Add):
        if _is_const(e.left, 0.0):
            return e.right
        if _is_const(e.right, 0.0):
            return e.left
    if isinstance(e, Sub):
        if _is_const(e.right, 0.0):
            return e.left
        if _is_const(e.left, 0.0):
            return Neg(e.right)
    if isinstance(e, Mul):
        if _is_const(e.left, 0.0) or _is_const(e.right, 0.0):
            return Constant(0.0)
        if _is_const(e.left, 1.0):
            return e.right
        if _is_const(e.right, 1.0):
            return e.left
        # Canonicalize constants to the left, then merge nested constants.
        if isinstance(e.right, Constant) and not isinstance(e.left, Constant):
            return Mul(e.right, e.left)
        if isinstance(e.left, Constant) and isinstance(e.right, Mul) \
                and isinstance(e.right.left, Constant):
            return Mul(Constant(e.left.value * e.right.left.value),
                       e.right.right)
    if isinstance(e, Div):
        if _is_const(e.left, 0.0):
            return Constant(0.0)
        if _is_const(e.right, 1.0):
            return e.left
        if isinstance(e.right, Constant) and e.right.value != 0.0 \
                and isinstance(e.left, Mul) and isinstance(e.left.left, Constant):
            return Mul(Constant(e.left.left.value / e.right.value),
                       e.left.right)
    if isinstance(e, Pow):
        if e.exponent == 0.0:
            return Constant(1.0)
        if e.exponent == 1.0:
            return e.base
    return e


def simplify(e: Expr) -> Expr:
    """Local, value-preserving rewrites: constant folding plus the usual
    identity/annihilator rules.  No deep algebraic canonicalization."""
    if isinstance(e, Neg):
        e = Neg(simplify(e.arg))
    elif isinstance(e, (Add, Sub, Mul, Div)):
        e = type(e)(simplify(e.left), simplify(e.right))
    elif isinstance(e, Pow):
        e = Pow(simplify(e.base), e.exponent)
    elif isinstance(e, Call):
        e = Call(e.func, simplify(e.arg))
    while True:
        rewritten = _rewrite(e)
        if rewritten is e:
            return e
        e = rewritten


def substitute(e: Expr, var: str, replacement: Expr) -> Expr:
    """Replace every occurrence of the named variable by another tree."""
    if isinstance(e, Variable):
        return replacement if e.name == var else e
    if isinstance(e, Constant):
        return e
    if isinstance(e, Neg):
        return Neg(substitute(e.arg, var, replacement))
    if isinstance(e, (Add, Sub, Mul, Div)):
        return type(e)(substitute(e.left, var, replacement),
                       substitute(e.right, var, replacement))
    if isinstance(e, Pow):
        return Pow(substitute(e.base, var, replacement), e.exponent)
    if isinstance(e, Call):
        return Call(e.func, substitute(e.arg, var, replacement))
    raise TypeError(f"not an Expr: {e!r}")


def variables(e: Expr) -> frozenset:
    """Set of variable names appearing in the tree."""
    if isinstance(e, Variable):
        return frozenset((e.name,))
    if isinstance(e, Constant):
        return frozenset()
    if isinstance(e, Neg):
        return variables(e.arg)
    if isinstance(e, (Add, Sub, Mul, Div)):
        return variables(e.left) | variables(e.right)
    if isinstance(e, Pow):
        return variables(e.base)
    if isinstance(e, Call):
        return variables(e.arg)
    raise TypeError(f"not an Expr: {e!r}")
