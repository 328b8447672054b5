"""
Coefficient expressions
=======================

A tiny arithmetic language for drift, dispersion, payoff and potential
coefficients. Expressions are parsed once by a recursive-descent parser into an
immutable tree and compiled into a closure over numpy ufuncs, so a single
expression can be evaluated on a scalar point or on a whole batch of paths.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('-' | '+') unary | power
    power  := atom ('^' unary)?            # right associative
    atom   := NUMBER | 'pi' | VARIABLE | FUNC '(' expr ')' | '(' expr ')'

Variables are ``x`` for one-dimensional models and ``x1 .. xn`` otherwise.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

__all__ = [
    "ExprError",
    "ExprSyntaxError",
    "UnknownIdentifierError",
    "ArityError",
    "EvaluationError",
    "Num",
    "Var",
    "Const",
    "Unary",
    "Binary",
    "Call",
    "CoefficientExpr",
    "parse_expression",
    "parse_coefficient",
    "state_variables",
    "FUNCTIONS",
]


class ExprError(ValueError):
    """Base class for expression errors; carries the offending offset."""

    def __init__(self, message: str, position: int | None = None, source: str = ""):
        self.position = position
        self.source = source
        where = f" at offset {position}" if position is not None else ""
        super().__init__(f"{message}{where}")


class ExprSyntaxError(ExprError):
    pass


class UnknownIdentifierError(ExprError):
    pass


class ArityError(ExprError):
    pass


class EvaluationError(ArithmeticError):
    pass


FUNCTIONS: dict[str, Callable] = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "tanh": np.tanh,
}
CONSTANTS = {"pi": math.pi}


# --------------------------------------------------------------------------
# syntax tree


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Const:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    operand: "Node"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


Node = Union[Num, Var, Const, Unary, Binary, Call]

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}
_UNARY_PREC = 3


def to_source(node: Node) -> str:
    """Render a tree back to source text that parses to the same tree."""
    if isinstance(node, Num):
        return repr(float(node.value))
    if isinstance(node, (Var, Const)):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}({', '.join(to_source(a) for a in node.args)})"
    if isinstance(node, Unary):
        inner = to_source(node.operand)
        if isinstance(node.operand, Binary) and _PREC[node.operand.op] < 4:
            inner = f"({inner})"
        elif isinstance(node.operand, Unary):
            inner = f"({inner})"
        return f"{node.op}{inner}"
    prec = _PREC[node.op]
    left = to_source(node.left)
    right = to_source(node.right)
    if node.op == "^":
        # left operand of ^ must be an atom; right side binds as unary
        if not isinstance(node.left, (Num, Var, Const, Call)):
            left = f"({left})"
        if isinstance(node.right, Binary) and _PREC[node.right.op] < 4:
            right = f"({right})"
        return f"{left}^{right}"
    if _needs_parens(node.left, prec, right_side=False):
        left = f"({left})"
    if _needs_parens(node.right, prec, right_side=True):
        right = f"({right})"
    return f"{left} {node.op} {right}"


def _needs_parens(child: Node, parent_prec: int, right_side: bool) -> bool:
    if isinstance(child, Binary):
        cp = _PREC[child.op]
        return cp < parent_prec or (right_side and cp == parent_prec)
    if isinstance(child, Unary):
        # "a - -b" is legal, but "a * -b" would re-associate nothing; keep it explicit
        return right_side or parent_prec > _UNARY_PREC
    return False


# --------------------------------------------------------------------------
# tokenizer and parser

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(source):
        if source[pos:].strip() == "":
            break
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            bad = pos + (len(source[pos:]) - len(source[pos:].lstrip()))
            raise ExprSyntaxError(f"unexpected character {source[bad]!r}", bad, source)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source: str, variables: Sequence[str]):
        self.source = source
        self.variables = tuple(variables)
        self.tokens = _tokenize(source)
        self.i = 0

    @property
    def tok(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, text, pos = self.tok
        if text != value or kind == "end":
            found = "end of input" if kind == "end" else repr(text)
            raise ExprSyntaxError(f"expected {value!r}, found {found}", pos, self.source)
        return self.advance()

    def parse(self) -> Node:
        node = self.expr()
        kind, text, pos = self.tok
        if kind != "end":
            raise ExprSyntaxError(f"unexpected {text!r}", pos, self.source)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.tok[1] in ("+", "-") and self.tok[0] == "op":
            op = self.advance()[1]
            node = Binary(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.tok[1] in ("*", "/") and self.tok[0] == "op":
            op = self.advance()[1]
            node = Binary(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.tok[0] == "op" and self.tok[1] in ("-", "+"):
            op = self.advance()[1]
            return Unary(op, self.unary())
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.tok[0] == "op" and self.tok[1] == "^":
            self.advance()
            return Binary("^", base, self.unary())
        return base

    def atom(self) -> Node:
        kind, text, pos = self.tok
        if kind == "num":
            self.advance()
            return Num(float(text))
        if kind == "name":
            self.advance()
            is_call = self.tok[0] == "op" and self.tok[1] == "("
            if text in FUNCTIONS:
                if not is_call:
                    raise ArityError(f"function {text!r} used without arguments", pos, self.source)
                self.advance()
                args = [self.expr()]
                while self.tok[0] == "op" and self.tok[1] == ",":
                    self.advance()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != 1:
                    raise ArityError(
                        f"function {text!r} takes 1 argument, got {len(args)}", pos, self.source
                    )
                return Call(text, tuple(args))
            if text in CONSTANTS or text in self.variables:
                if is_call:
                    raise ArityError(f"{text!r} is not a function", pos, self.source)
                return Const(text) if text in CONSTANTS else Var(text)
            raise UnknownIdentifierError(f"unknown identifier {text!r}", pos, self.source)
        if kind == "op" and text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(text)
        raise ExprSyntaxError(f"unexpected {found}", pos, self.source)


# --------------------------------------------------------------------------
# compilation


def _compile(node: Node, index: dict[str, int]) -> Callable:
    if isinstance(node, Num):
        v = node.value
        return lambda c: v
    if isinstance(node, Const):
        v = CONSTANTS[node.name]
        return lambda c: v
    if isinstance(node, Var):
        k = index[node.name]
        return lambda c: c[k]
    if isinstance(node, Call):
        fn = FUNCTIONS[node.func]
        arg = _compile(node.args[0], index)
        return lambda c: fn(arg(c))
    if isinstance(node, Unary):
        arg = _compile(node.operand, index)
        if node.op == "-":
            return lambda c: np.negative(arg(c))
        return arg
    left = _compile(node.left, index)
    right = _compile(node.right, index)
    op = {"+": np.add, "-": np.subtract, "*": np.multiply, "/": np.true_divide,
          "^": np.power}[node.op]
    return lambda c: op(left(c), right(c))


def _is_constant(node: Node) -> bool:
    if isinstance(node, (Num, Const)):
        return True
    if isinstance(node, Var):
        return False
    if isinstance(node, Call):
        return all(_is_constant(a) for a in node.args)
    if isinstance(node, Unary):
        return _is_constant(node.operand)
    return _is_constant(node.left) and _is_constant(node.right)


class CoefficientExpr:
    """A parsed, compiled scalar expression in a fixed list of variables.

    Calling the object with coordinate arrays (one per variable, broadcastable)
    returns a float array. Non-finite results are passed through so batch callers
    can flag them; use :meth:`value` for a checked scalar evaluation.
    """

    __slots__ = ("source", "variables", "tree", "_fn", "is_constant")

    def __init__(self, source: str, variables: Sequence[str], tree: Node):
        self.source = source
        self.variables = tuple(variables)
        self.tree = tree
        self._fn = _compile(tree, {v: i for i, v in enumerate(self.variables)})
        self.is_constant = _is_constant(tree)

    def __call__(self, *coords):
        if len(coords) != len(self.variables):
            raise TypeError(
                f"expression in {self.variables} expects {len(self.variables)} coordinates, "
                f"got {len(coords)}"
            )
        with np.errstate(all="ignore"):
            out = self._fn(coords)
        return np.asarray(out, dtype=float)

    def at(self, point) -> np.ndarray:
        """Evaluate at ``point`` whose leading axis indexes the variables."""
        point = np.asarray(point, dtype=float)
        if point.ndim == 0:
            point = point[None]
        return self(*point)

    def value(self, point) -> float:
        v = float(self.at(point))
        if not math.isfinite(v):
            raise EvaluationError(f"{self.source!r} is not finite at {np.asarray(point).tolist()}")
        return v

    def constant_value(self) -> float | None:
        """The value of a variable-free expression, else None."""
        if not self.is_constant:
            return None
        with np.errstate(all="ignore"):
            return float(self._fn(()))

    def pretty(self) -> str:
        return to_source(self.tree)

    def __repr__(self):
        return f"CoefficientExpr({self.source!r})"

    def __eq__(self, other):
        return (isinstance(other, CoefficientExpr) and self.tree == other.tree
                and self.variables == other.variables)

    def __hash__(self):
        return hash((self.tree, self.variables))

    def __reduce__(self):
        return (parse_expression, (self.source, self.variables))


def state_variables(n: int) -> tuple[str, ...]:
    if n < 1:
        raise ValueError("dimension must be at least 1")
    if n == 1:
        return ("x",)
    return tuple(f"x{i}" for i in range(1, n + 1))


def parse_expression(source: str, variables: Sequence[str]) -> CoefficientExpr:
    if not isinstance(source, str):
        source = repr(float(source))
    tree = _Parser(source, variables).parse()
    return CoefficientExpr(source, variables, tree)


def parse_coefficient(source: str, n: int) -> CoefficientExpr:
    """Parse a coefficient of the state ``x`` (n = 1) or ``x1 .. xn``.

    Parameters
    ----------
    source : str
        Expression text, e.g. ``"1 + x^2"`` or ``"sin(x1)*x2"``. Numbers are
        accepted too and converted to their literal text.
    n : int
        State dimension.

    Raises
    ------
    ExprSyntaxError, UnknownIdentifierError, ArityError
        With ``.position`` set to the offending character offset.
    """
    return parse_expression(source, state_variables(n))
