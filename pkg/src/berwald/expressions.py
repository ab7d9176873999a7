"""Expression mini-language for metric components, 1-form components and profiles.

Expressions are parsed once into an immutable AST and can then be evaluated
over any scalar ring: plain floats, or jets (see :mod:`berwald.jets`), in which
case the result carries exact derivatives. There is deliberately no symbolic
differentiation or simplification; all derivative work happens in the ring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping, Union

__all__ = [
    "Expr",
    "Num",
    "Sym",
    "Neg",
    "Add",
    "Sub",
    "Mul",
    "Div",
    "Pow",
    "Call",
    "ExpressionError",
    "ExpressionSyntaxError",
    "EvaluationError",
    "parse",
    "evaluate",
    "to_source",
    "free_symbols",
]

FUNCTIONS = ("sqrt", "exp", "log", "sin", "cos", "abs")


class ExpressionError(ValueError):
    """Base class for parse and evaluation failures."""


class ExpressionSyntaxError(ExpressionError):
    def __init__(self, message: str, source: str, offset: int):
        self.offset = offset
        self.line = source.count("\n", 0, offset) + 1
        self.column = offset - (source.rfind("\n", 0, offset) + 1) + 1
        super().__init__(f"{message} at offset {offset} (line {self.line}, column {self.column})")


class EvaluationError(ExpressionError):
    pass


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Sym:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class Add:
    lhs: "Expr"
    rhs: "Expr"


@dataclass(frozen=True)
class Sub:
    lhs: "Expr"
    rhs: "Expr"


@dataclass(frozen=True)
class Mul:
    lhs: "Expr"
    rhs: "Expr"


@dataclass(frozen=True)
class Div:
    lhs: "Expr"
    rhs: "Expr"


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: "Expr"


@dataclass(frozen=True)
class Call:
    fn: str
    arg: "Expr"


Expr = Union[Num, Sym, Neg, Add, Sub, Mul, Div, Pow, Call]


class _Parser:
    """Recursive descent with precedence power > unary minus > product > sum."""

    def __init__(self, source: str):
        self.source = source
        self.pos = 0

    def fail(self, message: str, offset: int | None = None):
        raise ExpressionSyntaxError(message, self.source, self.pos if offset is None else offset)

    def skip_ws(self):
        while self.pos < len(self.source) and self.source[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.source[self.pos] if self.pos < len(self.source) else ""

    def accept(self, token: str) -> bool:
        self.skip_ws()
        if self.source.startswith(token, self.pos):
            self.pos += len(token)
            return True
        return False

    def expect(self, token: str):
        if not self.accept(token):
            self.fail(f"expected {token!r}")

    def parse(self) -> Expr:
        self.skip_ws()
        if self.pos >= len(self.source):
            self.fail("empty expression")
        expr = self.sum()
        self.skip_ws()
        if self.pos < len(self.source):
            self.fail(f"unexpected input {self.source[self.pos]!r}")
        return expr

    def sum(self) -> Expr:
        expr = self.product()
        while True:
            if self.accept("+"):
                expr = Add(expr, self.product())
            elif self.accept("-"):
                expr = Sub(expr, self.product())
            else:
                return expr

    def product(self) -> Expr:
        # '**' must not be eaten as '*' followed by a unary factor
        expr = self.unary()
        while True:
            self.skip_ws()
            if self.source.startswith("*", self.pos) and not self.source.startswith("**", self.pos):
                self.pos += 1
                expr = Mul(expr, self.unary())
            elif self.accept("/"):
                expr = Div(expr, self.unary())
            else:
                return expr

    def unary(self) -> Expr:
        if self.accept("-"):
            return Neg(self.unary())
        if self.accept("+"):
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.accept("^") or self.accept("**"):
            # right associative; exponent may carry its own sign: x^-2
            return Pow(base, self.unary())
        return base

    def atom(self) -> Expr:
        self.skip_ws()
        if self.pos >= len(self.source):
            self.fail("unexpected end of expression")
        ch = self.source[self.pos]
        if ch == "(":
            self.pos += 1
            expr = self.sum()
            self.expect(")")
            return expr
        if ch.isdigit() or ch == ".":
            return self.number()
        if ch.isalpha() or ch == "_":
            return self.name()
        self.fail(f"unexpected character {ch!r}")

    def number(self) -> Expr:
        start = self.pos
        src = self.source
        while self.pos < len(src) and (src[self.pos].isdigit() or src[self.pos] == "."):
            self.pos += 1
        if self.pos < len(src) and src[self.pos] in "eE":
            mark = self.pos
            self.pos += 1
            if self.pos < len(src) and src[self.pos] in "+-":
                self.pos += 1
            if self.pos < len(src) and src[self.pos].isdigit():
                while self.pos < len(src) and src[self.pos].isdigit():
                    self.pos += 1
            else:
                self.pos = mark  # 'e' belongs to a following symbol, not the literal
        text = src[start:self.pos]
        try:
            return Num(float(text))
        except ValueError:
            self.fail(f"bad numeric literal {text!r}", start)

    def name(self) -> Expr:
        start = self.pos
        src = self.source
        while self.pos < len(src) and (src[self.pos].isalnum() or src[self.pos] == "_"):
            self.pos += 1
        ident = src[start:self.pos]
        self.skip_ws()
        if self.pos < len(src) and src[self.pos] == "(":
            if ident not in FUNCTIONS:
                self.fail(f"unknown function {ident!r}", start)
            self.pos += 1
            arg = self.sum()
            self.expect(")")
            return Call(ident, arg)
        return Sym(ident)


def parse(source: str) -> Expr:
    """Parse ``source`` into an expression tree.

    Raises :class:`ExpressionSyntaxError` (with offset, line and column) on
    malformed input and on unknown function names.
    """
    if not isinstance(source, str) or not source.strip():
        raise ExpressionSyntaxError("empty expression", source or "", 0)
    return _Parser(source).parse()


def _pow(base: Any, exponent: Any):
    """Power with exact integer handling.

    Integer exponents use repeated multiplication so that jets stay exact for
    negative bases; everything else goes through exp(log(.)).
    """
    if not isinstance(exponent, (int, float)):
        # jet-valued exponent: generic real power
        return (exponent * _fn("log", base)).exp()
    if float(exponent).is_integer() and abs(exponent) <= 512:
        k = int(exponent)
        if k < 0:
            if isinstance(base, (int, float)) and base == 0.0:
                raise EvaluationError("zero raised to a negative power")
            base = 1.0 / base
            k = -k
        result = 1.0
        acc = base
        while k:
            if k & 1:
                result = result * acc
            acc = acc * acc if k > 1 else acc
            k >>= 1
        return result
    if isinstance(base, (int, float)):
        if base <= 0.0:
            raise EvaluationError(f"non-integer power of non-positive base {base!r}")
        return math.pow(base, exponent)
    return base.pow_real(exponent)


def _fn(fn: str, value: Any):
    if isinstance(value, (int, float)):
        try:
            if fn == "sqrt":
                if value < 0:
                    raise EvaluationError(f"sqrt of negative value {value!r}")
                return math.sqrt(value)
            if fn == "exp":
                return math.exp(value)
            if fn == "log":
                if value <= 0:
                    raise EvaluationError(f"log of non-positive value {value!r}")
                return math.log(value)
            if fn == "sin":
                return math.sin(value)
            if fn == "cos":
                return math.cos(value)
            if fn == "abs":
                return abs(value)
        except OverflowError as exc:
            raise EvaluationError(f"overflow in {fn}({value!r})") from exc
        raise EvaluationError(f"unknown function {fn!r}")
    # jets and other rings implement the functions as methods
    if fn not in FUNCTIONS:
        raise EvaluationError(f"unknown function {fn!r}")
    if fn == "abs":
        return abs(value)
    return getattr(value, fn)()


def evaluate(expr: Expr, bindings: Mapping[str, Any]):
    """Evaluate ``expr`` with symbols bound to floats or jets.

    Fails loudly on unbound symbols and on domain errors of plain values
    (sqrt/log of a negative number, division by zero).
    """
    if isinstance(expr, Num):
        return expr.value
    if isinstance(expr, Sym):
        try:
            return bindings[expr.name]
        except KeyError:
            raise EvaluationError(f"unbound symbol {expr.name!r}") from None
    if isinstance(expr, Neg):
        return -evaluate(expr.arg, bindings)
    if isinstance(expr, Add):
        return evaluate(expr.lhs, bindings) + evaluate(expr.rhs, bindings)
    if isinstance(expr, Sub):
        return evaluate(expr.lhs, bindings) - evaluate(expr.rhs, bindings)
    if isinstance(expr, Mul):
        return evaluate(expr.lhs, bindings) * evaluate(expr.rhs, bindings)
    if isinstance(expr, Div):
        denominator = evaluate(expr.rhs, bindings)
        if isinstance(denominator, (int, float)) and denominator == 0.0:
            raise EvaluationError("division by zero")
        return evaluate(expr.lhs, bindings) / denominator
    if isinstance(expr, Pow):
        return _pow(evaluate(expr.base, bindings), evaluate(expr.exponent, bindings))
    if isinstance(expr, Call):
        return _fn(expr.fn, evaluate(expr.arg, bindings))
    raise TypeError(f"not an expression node: {expr!r}")


_PRECEDENCE = {Add: 1, Sub: 1, Mul: 2, Div: 2, Neg: 3, Pow: 4, Num: 5, Sym: 5, Call: 5}


def _render(expr: Expr, parent_prec: int, right_side: bool) -> str:
    prec = _PRECEDENCE[type(expr)]
    if isinstance(expr, Num):
        text = repr(expr.value)
        return text[:-2] if text.endswith(".0") else text
    if isinstance(expr, Sym):
        text = expr.name
    elif isinstance(expr, Neg):
        text = "-" + _render(expr.arg, prec, False)
    elif isinstance(expr, Add):
        text = _render(expr.lhs, prec, False) + " + " + _render(expr.rhs, prec, True)
    elif isinstance(expr, Sub):
        text = _render(expr.lhs, prec, False) + " - " + _render(expr.rhs, prec, True)
    elif isinstance(expr, Mul):
        text = _render(expr.lhs, prec, False) + "*" + _render(expr.rhs, prec, True)
    elif isinstance(expr, Div):
        text = _render(expr.lhs, prec, False) + "/" + _render(expr.rhs, prec, True)
    elif isinstance(expr, Pow):
        # right associative, and the exponent may be a unary minus
        text = _render(expr.base, prec + 1, False) + "^" + _render(expr.exponent, prec - 1, True)
    elif isinstance(expr, Call):
        return f"{expr.fn}({_render(expr.arg, 0, False)})"
    else:
        raise TypeError(f"not an expression node: {expr!r}")
    # subtraction, division and negation are not associative on the right
    needs_parens = prec < parent_prec or (
        prec == parent_prec and right_side and type(expr) in (Sub, Div, Add, Mul)
        and parent_prec in (_PRECEDENCE[Sub], _PRECEDENCE[Div])
    )
    return f"({text})" if needs_parens else text


def to_source(expr: Expr) -> str:
    """Render an expression so that ``parse(to_source(e))`` equals ``e``."""
    return _render(expr, 0, False)


def free_symbols(expr: Expr) -> set[str]:
    if isinstance(expr, Num):
        return set()
    if isinstance(expr, Sym):
        return {expr.name}
    if isinstance(expr, Neg):
        return free_symbols(expr.arg)
    if isinstance(expr, Call):
        return free_symbols(expr.arg)
    if isinstance(expr, Pow):
        return free_symbols(expr.base) | free_symbols(expr.exponent)
    return free_symbols(expr.lhs) | free_symbols(expr.rhs)
