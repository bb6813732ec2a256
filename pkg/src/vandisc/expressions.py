"""Tiny arithmetic expression language for problem coefficients.

Grammar (infix, left associative except ``^`` which is right associative):

    expr   := term  (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Recognised functions: ``abs`` (unary), ``min`` and ``max`` (n-ary, n >= 2).
Variable names are validated against a caller-supplied set, so the same
parser serves drift, diffusion and cost expressions with different
admissible variables (x1..xN, z1..zd, u1..uk).

Evaluation is numpy-vectorised: variables may be bound to arrays of any
broadcastable shape.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import reduce

import numpy as np

__all__ = [
    "ExpressionError",
    "UndefinedVariableError",
    "parse_expression",
    "compile_expression",
]


class ExpressionError(ValueError):
    """Syntax error in a coefficient expression, with source position."""

    def __init__(self, message: str, source: str, position: int):
        self.source = source
        self.position = position
        super().__init__(f"{message} at position {position} in {source!r}")


class UndefinedVariableError(ExpressionError):
    """A name used in an expression is not an admissible variable."""


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^(),]))"
)

_FUNCTIONS = {"abs": 1, "min": 2, "max": 2}  # name -> minimum arity


@dataclass(frozen=True)
class Token:
    kind: str  # "num" | "name" | "op" | "end"
    text: str
    pos: int


def _tokenize(source: str) -> list[Token]:
    tokens = []
    idx = 0
    while idx < len(source):
        m = _TOKEN_RE.match(source, idx)
        if m is None or m.end() == idx:
            # skip over whitespace-only tail
            if source[idx:].strip() == "":
                break
            bad = idx + len(source[idx:]) - len(source[idx:].lstrip())
            raise ExpressionError("unexpected character", source, bad)
        if m.lastgroup == "op" and m.group("op") == "**":
            tokens.append(Token("op", "^", m.start("op")))
        else:
            tokens.append(Token(m.lastgroup, m.group(m.lastgroup), m.start(m.lastgroup)))
        idx = m.end()
    tokens.append(Token("end", "", len(source)))
    return tokens


# ---------------------------------------------------------------------------
# AST nodes.  Each node evaluates against an environment dict and unparses to
# a string that reparses to an identical tree.
# ---------------------------------------------------------------------------


class Expr:
    precedence = 99

    def evaluate(self, env):
        raise NotImplementedError

    def unparse(self) -> str:
        raise NotImplementedError

    def variables(self) -> set:
        raise NotImplementedError

    def _wrap(self, child: "Expr", strict: bool = False) -> str:
        text = child.unparse()
        if child.precedence < self.precedence or (strict and child.precedence == self.precedence):
            return f"({text})"
        return text

    def __str__(self):
        return self.unparse()

    def __eq__(self, other):
        return type(self) is type(other) and self._key() == other._key()

    def __hash__(self):
        return hash((type(self).__name__, self._key()))

    def _key(self):
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Num(Expr):
    value: float
    precedence = 99

    def evaluate(self, env):
        return self.value

    def unparse(self):
        return repr(self.value)

    def variables(self):
        return set()

    def _key(self):
        return (self.value,)


@dataclass(frozen=True, eq=False)
class Var(Expr):
    name: str
    pos: int = 0
    precedence = 99

    def evaluate(self, env):
        return env[self.name]

    def unparse(self):
        return self.name

    def variables(self):
        return {self.name}

    def _key(self):
        return (self.name,)


@dataclass(frozen=True, eq=False)
class Neg(Expr):
    operand: Expr
    precedence = 25

    def evaluate(self, env):
        return -self.operand.evaluate(env)

    def unparse(self):
        return "-" + self._wrap(self.operand)

    def variables(self):
        return self.operand.variables()

    def _key(self):
        return (self.operand,)


_BINOPS = {
    "+": (10, np.add),
    "-": (10, np.subtract),
    "*": (20, np.multiply),
    "/": (20, np.true_divide),
    "^": (30, np.power),
}


@dataclass(frozen=True, eq=False)
class Bin(Expr):
    op: str
    left: Expr
    right: Expr

    @property
    def precedence(self):
        return _BINOPS[self.op][0]

    def evaluate(self, env):
        return _BINOPS[self.op][1](self.left.evaluate(env), self.right.evaluate(env))

    def unparse(self):
        if self.op == "^":
            # right associative: strict parens on the left child
            return f"{self._wrap(self.left, strict=True)}^{self._wrap(self.right)}"
        # left associative: strict parens on the right child for - and /
        strict_right = self.op in ("-", "/")
        return f"{self._wrap(self.left)} {self.op} {self._wrap(self.right, strict=strict_right)}"

    def variables(self):
        return self.left.variables() | self.right.variables()

    def _key(self):
        return (self.op, self.left, self.right)


_CALL_IMPL = {
    "abs": lambda args: np.abs(args[0]),
    "min": lambda args: reduce(np.minimum, args),
    "max": lambda args: reduce(np.maximum, args),
}


@dataclass(frozen=True, eq=False)
class Call(Expr):
    func: str
    args: tuple
    precedence = 99

    def evaluate(self, env):
        return _CALL_IMPL[self.func]([a.evaluate(env) for a in self.args])

    def unparse(self):
        return f"{self.func}({', '.join(a.unparse() for a in self.args)})"

    def variables(self):
        out = set()
        for a in self.args:
            out |= a.variables()
        return out

    def _key(self):
        return (self.func, self.args)


# ---------------------------------------------------------------------------
# Recursive descent parser.
# ---------------------------------------------------------------------------


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = _tokenize(source)
        self.idx = 0

    def peek(self) -> Token:
        return self.tokens[self.idx]

    def next(self) -> Token:
        tok = self.tokens[self.idx]
        self.idx += 1
        return tok

    def expect_op(self, text: str) -> Token:
        tok = self.next()
        if tok.kind != "op" or tok.text != text:
            raise ExpressionError(f"expected {text!r}", self.source, tok.pos)
        return tok

    def parse(self) -> Expr:
        node = self.expr()
        tok = self.peek()
        if tok.kind != "end":
            raise ExpressionError(f"unexpected trailing {tok.text!r}", self.source, tok.pos)
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.peek().kind == "op" and self.peek().text in "+-":
            op = self.next().text
            node = Bin(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.peek().kind == "op" and self.peek().text in "*/":
            op = self.next().text
            node = Bin(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        tok = self.peek()
        if tok.kind == "op" and tok.text == "-":
            self.next()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expr:
        node = self.atom()
        tok = self.peek()
        if tok.kind == "op" and tok.text == "^":
            self.next()
            node = Bin("^", node, self.unary())
        return node

    def atom(self) -> Expr:
        tok = self.next()
        if tok.kind == "num":
            return Num(float(tok.text))
        if tok.kind == "name":
            if self.peek().kind == "op" and self.peek().text == "(":
                if tok.text not in _FUNCTIONS:
                    raise ExpressionError(f"unknown function {tok.text!r}", self.source, tok.pos)
                self.next()
                args = [self.expr()]
                while self.peek().kind == "op" and self.peek().text == ",":
                    self.next()
                    args.append(self.expr())
                self.expect_op(")")
                if len(args) < _FUNCTIONS[tok.text]:
                    raise ExpressionError(
                        f"{tok.text} needs at least {_FUNCTIONS[tok.text]} argument(s)",
                        self.source,
                        tok.pos,
                    )
                if tok.text == "abs" and len(args) != 1:
                    raise ExpressionError("abs takes exactly one argument", self.source, tok.pos)
                return Call(tok.text, tuple(args))
            return Var(tok.text, tok.pos)
        if tok.kind == "op" and tok.text == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        raise ExpressionError(f"unexpected {tok.text!r}" if tok.text else "unexpected end of input",
                              self.source, tok.pos)


def parse_expression(source: str) -> Expr:
    """Parse a coefficient expression into its syntax tree."""
    return _Parser(source).parse()


def compile_expression(source: str, allowed: set[str]):
    """Parse and validate an expression, returning ``(tree, eval_fn)``.

    ``eval_fn(env)`` evaluates with numpy broadcasting; ``env`` maps each
    variable name in ``allowed`` to a scalar or ndarray.  Names outside
    ``allowed`` raise :class:`UndefinedVariableError` at compile time, which
    also catches dimension mismatches (e.g. ``x2`` in a one-dimensional
    problem).
    """
    tree = parse_expression(source)
    for name in sorted(tree.variables()):
        if name not in allowed:
            pos = _first_position(tree, name)
            raise UndefinedVariableError(
                f"undefined variable {name!r} (admissible: {sorted(allowed)})", source, pos
            )
    return tree, tree.evaluate


def _first_position(tree: Expr, name: str) -> int:
    if isinstance(tree, Var):
        return tree.pos if tree.name == name else -1
    children = []
    if isinstance(tree, Neg):
        children = [tree.operand]
    elif isinstance(tree, Bin):
        children = [tree.left, tree.right]
    elif isinstance(tree, Call):
        children = list(tree.args)
    for child in children:
        pos = _first_position(child, name)
        if pos >= 0:
            return pos
    return -1
