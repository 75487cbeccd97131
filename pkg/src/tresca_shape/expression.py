"""Small arithmetic expression language used for the load ``f`` and threshold ``g``.

Grammar (lowest to highest precedence)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?          # right associative
    atom   := NUMBER [implicit-mul atom] | 'x' | 'y' | 'pi'
            | FUNC '(' expr ')' | '(' expr ')'

``-2^2`` is ``-(2^2)``.  A numeric literal directly followed by an identifier
or a parenthesis is an implicit product (``2pi/3``).  Evaluation is
vectorized over numpy arrays.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "sqrt": np.sqrt,
    "abs": np.abs,
}
VARIABLES = ("x", "y")


class ExpressionSyntaxError(ValueError):
    def __init__(self, message: str, offset: int, expected: frozenset[str]):
        self.offset = offset
        self.expected = expected
        exp = ", ".join(sorted(expected)) if expected else "nothing"
        super().__init__(f"{message} at byte {offset} (expected one of: {exp})")


class EvaluationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Const:
    name: str  # only "pi"


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"


Node = Union[Num, Var, Const, Neg, BinOp, Call]


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


@dataclass
class _Token:
    kind: str  # "num", "ident", "op", "end"
    text: str
    offset: int


def _tokenize(text: str) -> list[_Token]:
    raw = text.encode("utf-8")
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            offset = len(text[:pos].encode("utf-8"))
            raise ExpressionSyntaxError(
                f"unexpected character {text[pos]!r}",
                offset,
                frozenset({"number", "identifier", "operator"}),
            )
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(_Token(kind, m.group(), len(text[:pos].encode("utf-8"))))
        pos = m.end()
    tokens.append(_Token("end", "", len(raw)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def fail(self, expected):
        tok = self.tok
        what = "end of input" if tok.kind == "end" else repr(tok.text)
        raise ExpressionSyntaxError(f"unexpected {what}", tok.offset, frozenset(expected))

    def accept(self, text: str) -> bool:
        if self.tok.kind == "op" and self.tok.text == text:
            self.i += 1
            return True
        return False

    def expect(self, text: str):
        if not self.accept(text):
            self.fail({text})

    def parse(self) -> Node:
        node = self.expr()
        if self.tok.kind != "end":
            self.fail({"+", "-", "*", "/", "^", "end of input"})
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.tok.text
            self.i += 1
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.tok.text
            self.i += 1
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.accept("-"):
            return Neg(self.unary())
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.accept("^"):
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Node:
        tok = self.tok
        if tok.kind == "num":
            self.i += 1
            node = Num(float(tok.text))
            nxt = self.tok
            if nxt.kind == "ident" or (nxt.kind == "op" and nxt.text == "("):
                return BinOp("*", node, self.power())
            return node
        if tok.kind == "ident":
            self.i += 1
            if tok.text in VARIABLES:
                return Var(tok.text)
            if tok.text == "pi":
                return Const("pi")
            if tok.text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(tok.text, arg)
            self.i -= 1
            raise ExpressionSyntaxError(
                f"unknown identifier {tok.text!r}",
                tok.offset,
                frozenset(set(VARIABLES) | {"pi"} | set(FUNCTIONS)),
            )
        if self.accept("("):
            node = self.expr()
            self.expect(")")
            return node
        self.fail({"number", "x", "y", "pi", "(", "-"} | set(FUNCTIONS))


def parse_expression(text: str) -> Node:
    """Parse ``text`` into an expression tree."""
    return _Parser(text).parse()


def to_text(node: Node) -> str:
    """Fully parenthesized text that parses back to the same tree."""
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Const):
        return node.name
    if isinstance(node, Neg):
        return f"(-{to_text(node.operand)})"
    if isinstance(node, BinOp):
        return f"({to_text(node.left)}{node.op}{to_text(node.right)})"
    if isinstance(node, Call):
        return f"{node.func}({to_text(node.arg)})"
    raise TypeError(node)


def evaluate(node: Node, x=0.0, y=0.0):
    """Evaluate at scalar or array coordinates.

    Raises EvaluationError on division by zero, square root of a negative
    number, non-integer exponents and non-finite results.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out = _eval(node, x, y)
    out = np.broadcast_to(out, np.broadcast_shapes(x.shape, y.shape)).astype(float)
    if not np.all(np.isfinite(out)):
        raise EvaluationError("non-finite value")
    return out if out.ndim else float(out)


def _eval(node: Node, x, y):
    if isinstance(node, Num):
        return np.float64(node.value)
    if isinstance(node, Var):
        return x if node.name == "x" else y
    if isinstance(node, Const):
        return np.float64(math.pi)
    if isinstance(node, Neg):
        return -_eval(node.operand, x, y)
    if isinstance(node, Call):
        arg = _eval(node.arg, x, y)
        if node.func == "sqrt" and np.any(arg < 0):
            raise EvaluationError("sqrt of a negative number")
        with np.errstate(over="ignore"):
            return FUNCTIONS[node.func](arg)
    if isinstance(node, BinOp):
        left = _eval(node.left, x, y)
        right = _eval(node.right, x, y)
        if node.op == "+":
            return left + right
        if node.op == "-":
            return left - right
        if node.op == "*":
            return left * right
        if node.op == "/":
            if np.any(right == 0):
                raise EvaluationError("division by zero")
            return left / right
        if node.op == "^":
            right = np.asarray(right)
            if np.any(right != np.round(right)):
                raise EvaluationError("exponent must be an integer")
            if np.any((left == 0) & (right < 0)):
                raise EvaluationError("division by zero")
            with np.errstate(over="ignore"):
                return np.power(np.asarray(left, dtype=float), right)
    raise TypeError(node)


class ScalarField:
    """Callable ``points (n, 2) -> (n,)`` backed by an expression."""

    def __init__(self, text: str):
        self.text = text
        self.node = parse_expression(text)

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        return np.broadcast_to(evaluate(self.node, pts[..., 0], pts[..., 1]), pts.shape[:-1]).copy()

    def __repr__(self):
        return f"ScalarField({self.text!r})"


class VectorField2:
    """Callable ``points (n, 2) -> (n, 2)`` built from two component expressions."""

    def __init__(self, text_x: str, text_y: str):
        self.fx = ScalarField(text_x)
        self.fy = ScalarField(text_y)

    def __call__(self, pts):
        return np.stack([self.fx(pts), self.fy(pts)], axis=-1)

    def __repr__(self):
        return f"VectorField2({self.fx.text!r}, {self.fy.text!r})"


class RadialTaper:
    """Wraps a field so points beyond ``radius`` see the value at the radial projection."""

    def __init__(self, field, radius: float):
        self.field = field
        self.radius = float(radius)

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        r = np.linalg.norm(pts, axis=-1, keepdims=True)
        scale = np.where(r > self.radius, self.radius / np.maximum(r, 1e-300), 1.0)
        return self.field(pts * scale)
