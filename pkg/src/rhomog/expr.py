"""A tiny arithmetic language for coefficient functions.

Expressions such as ``"2*pi*sin(2*pi*y1)"`` are tokenized, parsed with a
Pratt parser into an immutable AST, and evaluated either on scalars or on
numpy arrays (one value per sample point).  Operator precedence, tightest
first: ``^`` (right associative), unary minus, ``* /``, ``+ -``.  So
``-x1^2`` is ``-(x1^2)`` and ``2^3^2`` is ``2^(3^2)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Union

import numpy as np

from .errors import (
    EvalError,
    BadArity,
    DivisionByZero,
    DomainError,
    MalformedNumber,
    TrailingInput,
    UnboundVariable,
    UnexpectedCharacter,
    UnexpectedToken,
    UnknownFunction,
    UnknownVariable,
    VariableOutOfRange,
)

FUNCTIONS = {
    "sin": 1, "cos": 1, "exp": 1, "tanh": 1, "sqrt": 1,
    "abs": 1, "floor": 1, "min": 2, "max": 2,
}
CONSTANTS = {"pi": math.pi, "e": math.e}

_SINGLE = {
    "+": "plus", "-": "minus", "*": "star", "/": "slash",
    "^": "caret", "(": "lparen", ")": "rparen", ",": "comma",
}
_NUMBER = re.compile(r"[0-9]+(\.[0-9]+)?([eE][+-]?[0-9]+)?")
_IDENT = re.compile(r"[a-zA-Z_][a-zA-Z0-9_]*")
_INDEXED = re.compile(r"([xy])([0-9]+)")


@dataclass(frozen=True)
class Token:
    kind: str
    lexeme: str
    position: int


def tokenize(source: str) -> list[Token]:
    tokens: list[Token] = []
    i, n = 0, len(source)

    def offset(k):
        return len(source[:k].encode("utf-8"))

    while i < n:
        ch = source[i]
        if ch.isspace():
            i += 1
            continue
        if ch in _SINGLE:
            tokens.append(Token(_SINGLE[ch], ch, offset(i)))
            i += 1
            continue
        if ch.isdigit():
            m = _NUMBER.match(source, i)
            end = m.end()
            # "2." / "2..3" / "1e" / "1e+": the grammar forbids a dangling tail
            if end < n and source[end] in ".eE":
                raise MalformedNumber("malformed number", offset(end))
            tokens.append(Token("number", m.group(0), offset(i)))
            i = end
            continue
        if ch == ".":
            raise MalformedNumber("number must start with a digit", offset(i))
        m = _IDENT.match(source, i)
        if m:
            tokens.append(Token("identifier", m.group(0), offset(i)))
            i = m.end()
            continue
        raise UnexpectedCharacter(f"unexpected character {ch!r}", offset(i))
    return tokens


# -- AST --------------------------------------------------------------------

@dataclass(frozen=True)
class Const:
    value: float
    name: str | None = None


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    child: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


Expr = Union[Const, Var, Unary, Binary, Call]

_INFIX = {"plus": ("+", 10, 11), "minus": ("-", 10, 11),
          "star": ("*", 20, 21), "slash": ("/", 20, 21),
          "caret": ("^", 40, 40)}
_UNARY_BP = 30


def vocabulary(dim: int) -> frozenset[str]:
    names = {"t", "u"}
    names.update(f"x{i}" for i in range(1, dim + 1))
    names.update(f"y{i}" for i in range(1, dim + 1))
    return frozenset(names)


class _Parser:
    def __init__(self, tokens, dim, allowed):
        self.tokens = list(tokens)
        self.pos = 0
        self.dim = dim
        self.allowed = allowed

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def advance(self):
        tok = self.peek()
        if tok is None:
            end = self.tokens[-1].position + len(self.tokens[-1].lexeme) if self.tokens else 0
            raise UnexpectedToken("unexpected end of input", end)
        self.pos += 1
        return tok

    def expect(self, kind):
        tok = self.advance()
        if tok.kind != kind:
            raise UnexpectedToken(f"expected {kind}, found {tok.lexeme!r}", tok.position)
        return tok

    def expression(self, min_bp=0):
        left = self.prefix()
        while True:
            tok = self.peek()
            if tok is None or tok.kind not in _INFIX:
                return left
            op, lbp, rbp = _INFIX[tok.kind]
            if lbp < min_bp:
                return left
            self.advance()
            left = Binary(op, left, self.expression(rbp))

    def prefix(self):
        tok = self.advance()
        if tok.kind == "number":
            return Const(float(tok.lexeme))
        if tok.kind == "minus":
            return Unary(self.expression(_UNARY_BP))
        if tok.kind == "lparen":
            inner = self.expression()
            self.expect("rparen")
            return inner
        if tok.kind == "identifier":
            return self.identifier(tok)
        raise UnexpectedToken(f"unexpected {tok.lexeme!r}", tok.position)

    def identifier(self, tok):
        name = tok.lexeme
        nxt = self.peek()
        if nxt is not None and nxt.kind == "lparen":
            if name not in FUNCTIONS:
                raise UnknownFunction(f"unknown function {name!r}", tok.position)
            self.advance()
            args = [self.expression()]
            while self.peek() is not None and self.peek().kind == "comma":
                self.advance()
                args.append(self.expression())
            self.expect("rparen")
            if len(args) != FUNCTIONS[name]:
                raise BadArity(f"{name} takes {FUNCTIONS[name]} argument(s), got {len(args)}",
                               tok.position)
            return Call(name, tuple(args))
        if name in FUNCTIONS:
            raise UnexpectedToken(f"function {name!r} used without arguments", tok.position)
        if name in CONSTANTS:
            return Const(CONSTANTS[name], name)
        m = _INDEXED.fullmatch(name)
        if m and not 1 <= int(m.group(2)) <= self.dim:
            raise VariableOutOfRange(f"{name} is out of range for dimension {self.dim}",
                                     tok.position)
        if name not in vocabulary(self.dim):
            raise UnknownVariable(f"unknown variable {name!r}", tok.position)
        if self.allowed is not None and name not in self.allowed:
            raise UnknownVariable(f"variable {name!r} is not allowed here", tok.position)
        return Var(name)


def parse(tokens: Iterable[Token], dim: int, allowed: Iterable[str] | None = None) -> Expr:
    """Parse a token list into an AST.

    ``allowed`` optionally narrows the variable vocabulary (for example a
    terminal condition may only mention ``x1..xd``).
    """
    p = _Parser(tokens, dim, None if allowed is None else frozenset(allowed))
    if p.peek() is None:
        raise UnexpectedToken("empty expression", 0)
    ast = p.expression()
    extra = p.peek()
    if extra is not None:
        raise TrailingInput(f"unexpected trailing {extra.lexeme!r}", extra.position)
    return ast


def parse_expr(source: str, dim: int, allowed: Iterable[str] | None = None) -> Expr:
    return parse(tokenize(source), dim, allowed)


def free_variables(ast: Expr) -> frozenset[str]:
    if isinstance(ast, Var):
        return frozenset([ast.name])
    if isinstance(ast, Unary):
        return free_variables(ast.child)
    if isinstance(ast, Binary):
        return free_variables(ast.left) | free_variables(ast.right)
    if isinstance(ast, Call):
        out = frozenset()
        for a in ast.args:
            out |= free_variables(a)
        return out
    return frozenset()


# -- printing ---------------------------------------------------------------

def to_source(ast: Expr) -> str:
    """Fully parenthesized source text; re-parses to an identical AST."""
    if isinstance(ast, Const):
        if ast.name:
            return ast.name
        return "1e999" if math.isinf(ast.value) else repr(float(ast.value))
    if isinstance(ast, Var):
        return ast.name
    if isinstance(ast, Unary):
        return f"(-{to_source(ast.child)})"
    if isinstance(ast, Binary):
        return f"({to_source(ast.left)} {ast.op} {to_source(ast.right)})"
    return f"{ast.func}({', '.join(to_source(a) for a in ast.args)})"


# -- evaluation -------------------------------------------------------------

_UFUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "tanh": np.tanh,
           "abs": np.abs, "floor": np.floor}


def _pow(a, b):
    a_arr, b_arr = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    neg = a_arr < 0
    if np.any(neg & (np.floor(b_arr) != b_arr)):
        raise DomainError("negative base with non-integer exponent")
    if np.any((a_arr == 0) & (b_arr < 0)):
        raise DivisionByZero("zero raised to a negative power")
    return np.power(a_arr, b_arr)


def _eval(ast, env):
    if isinstance(ast, Const):
        return ast.value
    if isinstance(ast, Var):
        try:
            return env[ast.name]
        except KeyError:
            raise UnboundVariable(f"variable {ast.name!r} is not bound") from None
    if isinstance(ast, Unary):
        return np.negative(_eval(ast.child, env))
    if isinstance(ast, Binary):
        a = _eval(ast.left, env)
        b = _eval(ast.right, env)
        if ast.op == "+":
            return np.add(a, b)
        if ast.op == "-":
            return np.subtract(a, b)
        if ast.op == "*":
            return np.multiply(a, b)
        if ast.op == "/":
            if np.any(np.asarray(b) == 0):
                raise DivisionByZero("division by zero")
            return np.divide(a, b)
        return _pow(a, b)
    args = [_eval(a, env) for a in ast.args]
    if ast.func == "sqrt":
        if np.any(np.asarray(args[0]) < 0):
            raise DomainError("sqrt of a negative number")
        return np.sqrt(args[0])
    if ast.func == "min":
        return np.minimum(*args)
    if ast.func == "max":
        return np.maximum(*args)
    return _UFUNCS[ast.func](args[0])


def evaluate(ast: Expr, env: Mapping[str, float]) -> float:
    """Evaluate on scalars; returns a Python float."""
    with np.errstate(over="ignore", invalid="ignore"):
        return float(_eval(ast, env))


_CACHE: dict = {}


def _compiled(ast):
    fn = _CACHE.get(ast)
    if fn is None:
        fn = _CACHE[ast] = compile_expr(ast)[0]
    return fn


def evaluate_array(ast: Expr, env: Mapping[str, np.ndarray], shape=None) -> np.ndarray:
    """Evaluate elementwise over arrays bound in ``env``.

    The result is broadcast to ``shape`` (or to the common shape of the
    bound arrays) so constant expressions still give one value per point.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.asarray(_compiled(ast)(env), dtype=float)
    if shape is None:
        shapes = [np.shape(v) for v in env.values()]
        shape = np.broadcast_shapes(*shapes) if shapes else ()
    return np.broadcast_to(out, shape).copy() if out.shape != tuple(shape) else out


def compile_expr(ast: Expr):
    """Turn an AST into a callable ``env -> value`` with constant subtrees folded.

    Returns ``(fn, constant)`` where ``constant`` is the folded float when
    the whole expression has no free variables, else ``None``.
    """
    if not free_variables(ast):
        try:
            value = evaluate(ast, {})
        except EvalError:
            pass
        else:
            return (lambda env, _v=value: _v), value
    if isinstance(ast, Var):
        name = ast.name

        def var(env):
            try:
                return env[name]
            except KeyError:
                raise UnboundVariable(f"variable {name!r} is not bound") from None
        return var, None
    if isinstance(ast, Unary):
        child, _ = compile_expr(ast.child)
        return (lambda env: np.negative(child(env))), None
    if isinstance(ast, Binary):
        left, _ = compile_expr(ast.left)
        right, _ = compile_expr(ast.right)
        simple = {"+": np.add, "-": np.subtract, "*": np.multiply}
        if ast.op in simple:
            op = simple[ast.op]
            return (lambda env: op(left(env), right(env))), None
        if ast.op == "/":
            def div(env):
                b = right(env)
                if np.any(np.asarray(b) == 0):
                    raise DivisionByZero("division by zero")
                return np.divide(left(env), b)
            return div, None
        return (lambda env: _pow(left(env), right(env))), None
    args = [compile_expr(a)[0] for a in ast.args]
    if ast.func == "sqrt":
        def sqrt(env):
            a = args[0](env)
            if np.any(np.asarray(a) < 0):
                raise DomainError("sqrt of a negative number")
            return np.sqrt(a)
        return sqrt, None
    if ast.func in ("min", "max"):
        op = np.minimum if ast.func == "min" else np.maximum
        return (lambda env: op(args[0](env), args[1](env))), None
    ufunc = _UFUNCS[ast.func]
    return (lambda env: ufunc(args[0](env))), None
