"""Small expression language for coefficients and integrands.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := '-' factor | power
    power  := base ('^' exponent)?
    exponent := '-'? integer ('^' exponent)?
    base   := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'

``^`` binds tighter than unary minus, so ``-x^2`` is ``-(x^2)``, and chains
of integer exponents associate to the right.  Variables are ``x1..xN``,
``y1..yN`` and ``xi1..xid``; ``pi`` is the only named constant.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import (
    DivisionByZero,
    ExprSyntaxError,
    NonDifferentiable,
    UnboundVariable,
    UnknownIdentifier,
)

FUNCTIONS = {"sin": 1, "cos": 1, "exp": 1, "abs": 1, "min": 2, "max": 2}
CONSTANTS = {"pi": np.pi}
VAR_RE = re.compile(r"(x|y|xi)([1-9][0-9]*)\Z")


# --- AST --------------------------------------------------------------------

class Expr:
    """Base node. Subclasses are frozen dataclasses, hence hashable."""

    def __str__(self) -> str:
        return to_string(self)


@dataclass(frozen=True)
class Num(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True)
class Bin(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Pow(Expr):
    base: Expr
    exponent: int


@dataclass(frozen=True)
class Call(Expr):
    name: str
    args: tuple[Expr, ...]


# --- tokenizer and parser ---------------------------------------------------

TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


@dataclass
class _Tok:
    kind: str
    text: str
    offset: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = TOKEN_RE.match(text, pos)
        if not m:
            off = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ExprSyntaxError(f"unexpected character {text[off]!r}", off)
        kind = m.lastgroup
        toks.append(_Tok(kind, m.group(kind), m.start(kind)))
        pos = m.end()
    toks.append(_Tok("end", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> None:
        if self.tok.text != text:
            found = "end of input" if self.tok.kind == "end" else repr(self.tok.text)
            raise ExprSyntaxError(f"expected {text!r}, found {found}", self.tok.offset)
        self.take()

    def parse(self) -> Expr:
        e = self.expr()
        if self.tok.kind != "end":
            raise ExprSyntaxError(f"unexpected {self.tok.text!r}", self.tok.offset)
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.tok.text in ("+", "-"):
            op = self.take().text
            e = Bin(op, e, self.term())
        return e

    def term(self) -> Expr:
        e = self.factor()
        while self.tok.text in ("*", "/"):
            op = self.take().text
            e = Bin(op, e, self.factor())
        return e

    def factor(self) -> Expr:
        if self.tok.text == "-":
            self.take()
            return Neg(self.factor())
        return self.power()

    def power(self) -> Expr:
        b = self.base()
        if self.tok.text == "^":
            self.take()
            return Pow(b, self.exponent())
        return b

    def exponent(self) -> int:
        sign = 1
        if self.tok.text == "-":
            self.take()
            sign = -1
        t = self.tok
        if t.kind != "num" or not t.text.isdigit():
            raise ExprSyntaxError("expected integer exponent", t.offset)
        self.take()
        value = int(t.text)
        if self.tok.text == "^":
            self.take()
            inner = self.exponent()
            if inner < 0:
                raise ExprSyntaxError("exponent chain must stay integral", t.offset)
            value = value**inner
        return sign * value

    def base(self) -> Expr:
        t = self.tok
        if t.kind == "num":
            self.take()
            return Num(float(t.text))
        if t.kind == "ident":
            self.take()
            if self.tok.text == "(":
                if t.text not in FUNCTIONS:
                    raise UnknownIdentifier(t.text, t.offset)
                self.take()
                args = [self.expr()]
                while self.tok.text == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != FUNCTIONS[t.text]:
                    raise ExprSyntaxError(
                        f"{t.text} takes {FUNCTIONS[t.text]} argument(s), got {len(args)}", t.offset
                    )
                return Call(t.text, tuple(args))
            if t.text in CONSTANTS:
                return Var(t.text)
            if VAR_RE.match(t.text):
                return Var(t.text)
            raise UnknownIdentifier(t.text, t.offset)
        if t.text == "(":
            self.take()
            e = self.expr()
            self.expect(")")
            return e
        found = "end of input" if t.kind == "end" else repr(t.text)
        raise ExprSyntaxError(f"unexpected {found}", t.offset)


def parse(text: str) -> Expr:
    if not text or not text.strip():
        raise ExprSyntaxError("empty expression", 0)
    return _Parser(text).parse()


# --- printing ---------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _fmt_num(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def to_string(e: Expr, parent: int = 0) -> str:
    """Canonical printer; the output reparses to the same tree."""
    if isinstance(e, Num):
        s = _fmt_num(e.value)
        return f"({s})" if e.value < 0 and parent > 1 else s
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.name}(" + ", ".join(to_string(a) for a in e.args) + ")"
    if isinstance(e, Neg):
        s = "-" + to_string(e.arg, 3)
        return f"({s})" if parent > 1 else s
    if isinstance(e, Pow):
        b = to_string(e.base, 5)
        if isinstance(e.base, Pow):
            b = f"({b})"
        return f"{b}^{e.exponent}"
    if isinstance(e, Bin):
        p = _PREC[e.op]
        left = to_string(e.left, p)
        # right operand of a left-associative operator needs a strictly higher level
        right = to_string(e.right, p + 1)
        s = f"{left} {e.op} {right}" if p == 1 else f"{left}*{right}" if e.op == "*" else f"{left}/{right}"
        return f"({s})" if p < parent else s
    raise TypeError(f"not an expression node: {e!r}")


# --- evaluation -------------------------------------------------------------

def free_variables(e: Expr) -> set[str]:
    if isinstance(e, Var):
        return set() if e.name in CONSTANTS else {e.name}
    if isinstance(e, Num):
        return set()
    if isinstance(e, Neg):
        return free_variables(e.arg)
    if isinstance(e, Pow):
        return free_variables(e.base)
    if isinstance(e, Bin):
        return free_variables(e.left) | free_variables(e.right)
    return set().union(*(free_variables(a) for a in e.args))


_UNARY = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "abs": np.abs}


def evaluate(e: Expr, bindings: dict):
    """Evaluate with numpy broadcasting over array-valued bindings."""
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        if e.name in CONSTANTS:
            return CONSTANTS[e.name]
        try:
            return bindings[e.name]
        except KeyError:
            raise UnboundVariable(e.name) from None
    if isinstance(e, Neg):
        return -evaluate(e.arg, bindings)
    if isinstance(e, Pow):
        b = evaluate(e.base, bindings)
        if e.exponent < 0:
            if np.any(np.asarray(b) == 0):
                raise DivisionByZero(f"zero base raised to negative power in {to_string(e)}")
            return 1.0 / np.power(b, -e.exponent)
        return np.power(b, e.exponent) if e.exponent != 1 else b
    if isinstance(e, Bin):
        a = evaluate(e.left, bindings)
        b = evaluate(e.right, bindings)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if np.any(np.asarray(b) == 0):
            raise DivisionByZero(f"division by zero in {to_string(e)}")
        return a / b
    if isinstance(e, Call):
        args = [evaluate(a, bindings) for a in e.args]
        if e.name in _UNARY:
            return _UNARY[e.name](args[0])
        if e.name == "min":
            return np.minimum(*args)
        return np.maximum(*args)
    raise TypeError(f"not an expression node: {e!r}")


def eval_expr(e: Expr | str, **bindings) -> float:
    if isinstance(e, str):
        e = parse(e)
    return evaluate(e, bindings)


# --- symbolic differentiation ----------------------------------------------

ZERO = Num(0.0)
ONE = Num(1.0)


def _is_num(e: Expr, v: float | None = None) -> bool:
    return isinstance(e, Num) and (v is None or e.value == v)


def _add(a: Expr, b: Expr) -> Expr:
    if _is_num(a) and _is_num(b):
        return Num(a.value + b.value)
    if _is_num(a, 0):
        return b
    if _is_num(b, 0):
        return a
    return Bin("+", a, b)


def _sub(a: Expr, b: Expr) -> Expr:
    if _is_num(a) and _is_num(b):
        return Num(a.value - b.value)
    if _is_num(b, 0):
        return a
    if _is_num(a, 0):
        return _neg(b)
    return Bin("-", a, b)


def _mul(a: Expr, b: Expr) -> Expr:
    if _is_num(a) and _is_num(b):
        return Num(a.value * b.value)
    if _is_num(a, 0) or _is_num(b, 0):
        return ZERO
    if _is_num(a, 1):
        return b
    if _is_num(b, 1):
        return a
    return Bin("*", a, b)


def _div(a: Expr, b: Expr) -> Expr:
    if _is_num(a, 0):
        return ZERO
    if _is_num(b, 1):
        return a
    return Bin("/", a, b)


def _neg(a: Expr) -> Expr:
    if _is_num(a):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _pow(a: Expr, k: int) -> Expr:
    if k == 0:
        return ONE
    if k == 1:
        return a
    if _is_num(a):
        return Num(a.value**k)
    return Pow(a, k)


def depends_on(e: Expr, name: str) -> bool:
    return name in free_variables(e)


def diff(e: Expr, name: str, path: str = "root") -> Expr:
    """Partial derivative with respect to variable ``name``, with constant folding."""
    if not depends_on(e, name):
        return ZERO
    if isinstance(e, Var):
        return ONE
    if isinstance(e, Neg):
        return _neg(diff(e.arg, name, path + ".arg"))
    if isinstance(e, Pow):
        inner = diff(e.base, name, path + ".base")
        return _mul(_mul(Num(float(e.exponent)), _pow(e.base, e.exponent - 1)), inner)
    if isinstance(e, Bin):
        da = diff(e.left, name, path + ".left")
        db = diff(e.right, name, path + ".right")
        if e.op == "+":
            return _add(da, db)
        if e.op == "-":
            return _sub(da, db)
        if e.op == "*":
            return _add(_mul(da, e.right), _mul(e.left, db))
        # quotient rule
        return _div(_sub(_mul(da, e.right), _mul(e.left, db)), _pow(e.right, 2))
    if isinstance(e, Call):
        if e.name in ("abs", "min", "max"):
            raise NonDifferentiable(f"{path} ({to_string(e)})")
        a = e.args[0]
        da = diff(a, name, path + ".args[0]")
        if e.name == "sin":
            return _mul(Call("cos", (a,)), da)
        if e.name == "cos":
            return _mul(_neg(Call("sin", (a,))), da)
        return _mul(e, da)
    raise TypeError(f"not an expression node: {e!r}")


def grad_xi(e: Expr, d: int) -> tuple[Expr, ...]:
    """Symbolic partials with respect to ``xi1..xid``."""
    return tuple(diff(e, f"xi{i + 1}") for i in range(d))


def max_index(e: Expr, prefix: str) -> int:
    """Largest index used by variables of the given family (``x``, ``y`` or ``xi``)."""
    best = 0
    for name in free_variables(e):
        m = VAR_RE.match(name)
        if m and m.group(1) == prefix:
            best = max(best, int(m.group(2)))
    return best
