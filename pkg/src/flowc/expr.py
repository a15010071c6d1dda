"""Closed expression language for deterministic plan nodes.

Programs are single expressions: arithmetic over exact rationals, string
concatenation, comparisons, JSON field/index access, list literals, and a
fixed set of builtin calls (``extract_answer``, ``majority_vote``,
``parse_json``, ``numbers``, ``text``). There are no loops, no recursion,
no assignments and no IO, so every well-formed program terminates and
evaluation is a pure function of the bound inputs.

The grammar is documented in EBNF in ``docs/grammar.ebnf``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Union

Number = Union[int, Fraction]
# Values that can flow between plan nodes: exact numbers, text, parsed JSON
# trees and lists of any of these.
Value = Union[int, Fraction, str, bool, None, list, dict]

# Arithmetic is exact; this guard only bounds runaway growth (repeated `^`)
# so evaluation stays total with a typed error instead of eating memory.
_MAX_MAGNITUDE_BITS = 1024
_MAX_EXPONENT = 64
# ~8 interpreter frames per nesting level; keep well under the default
# recursion limit so the guard fires before CPython's does.
_MAX_PARSE_DEPTH = 100

_NUMBER_RE = re.compile(r"[-+]?\$?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?")
_ANSWER_MARKER = "####"


class ExprError(ValueError):
    """Base class for expression language failures."""


class ExprSyntaxError(ExprError):
    """Malformed program text. ``position`` is a character offset."""

    def __init__(self, message: str, position: int) -> None:
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class ExprEvalError(ExprError):
    """Typed runtime failure: unbound name, type mismatch, division by
    zero, numeric overflow, bad extraction input, and so on."""


class ExtractionError(ExprEvalError):
    """No numeric answer could be extracted from a text."""


# --------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Lit:
    value: int | Fraction | str


@dataclass(frozen=True)
class Name:
    ident: str


@dataclass(frozen=True)
class ListExpr:
    items: tuple["Expr", ...]


@dataclass(frozen=True)
class Unary:
    op: str
    operand: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Field:
    base: "Expr"
    name: str


@dataclass(frozen=True)
class Index:
    base: "Expr"
    index: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple["Expr", ...]


Expr = Union[Lit, Name, ListExpr, Unary, Binary, Field, Index, Call]


@dataclass(frozen=True)
class Program:
    """A parsed program. ``source`` is the original text, ``ast`` the tree."""

    source: str
    ast: Expr


# --------------------------------------------------------------------------
# Tokenizer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>\d+(?:\.\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<string>"(?:\\.|[^"\\])*")
  | (?P<op>==|!=|<=|>=|[-+*/%^()\[\],.<>])
    """,
    re.VERBOSE,
)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens: list[tuple[str, str, int]] = []
    pos = 0
    while pos < len(source):
        match = _TOKEN_RE.match(source, pos)
        if match is None:
            raise ExprSyntaxError(f"unexpected character {source[pos]!r}", pos)
        kind = match.lastgroup or ""
        if kind != "ws":
            tokens.append((kind, match.group(), pos))
        pos = match.end()
    tokens.append(("eof", "", len(source)))
    return tokens


_STRING_ESCAPES = {"n": "\n", "t": "\t", '"': '"', "\\": "\\"}


def _unescape(raw: str, position: int) -> str:
    body = raw[1:-1]
    out: list[str] = []
    i = 0
    while i < len(body):
        ch = body[i]
        if ch == "\\":
            i += 1
            if i >= len(body) or body[i] not in _STRING_ESCAPES:
                raise ExprSyntaxError("bad string escape", position + i)
            out.append(_STRING_ESCAPES[body[i]])
        else:
            out.append(ch)
        i += 1
    return "".join(out)


# --------------------------------------------------------------------------
# Parser (recursive descent)

_COMPARE_OPS = ("==", "!=", "<=", ">=", "<", ">")


class _Parser:
    def __init__(self, tokens: list[tuple[str, str, int]]) -> None:
        self.tokens = tokens
        self.pos = 0
        self.depth = 0

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.pos]

    def next(self) -> tuple[str, str, int]:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, text: str) -> None:
        kind, value, position = self.next()
        if value != text or kind == "eof":
            raise ExprSyntaxError(f"expected {text!r}, found {value!r}", position)

    def _enter(self, position: int) -> None:
        self.depth += 1
        if self.depth > _MAX_PARSE_DEPTH:
            raise ExprSyntaxError("expression nested too deeply", position)

    def parse(self) -> Expr:
        node = self.expression()
        kind, value, position = self.peek()
        if kind != "eof":
            raise ExprSyntaxError(f"trailing input {value!r}", position)
        return node

    def expression(self) -> Expr:
        self._enter(self.peek()[2])
        try:
            node = self.additive()
            while self.peek()[1] in _COMPARE_OPS:
                op = self.next()[1]
                node = Binary(op, node, self.additive())
            return node
        finally:
            self.depth -= 1

    def additive(self) -> Expr:
        node = self.multiplicative()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.next()[1]
            node = Binary(op, node, self.multiplicative())
        return node

    def multiplicative(self) -> Expr:
        node = self.power()
        while self.peek()[1] in ("*", "/", "%"):
            op = self.next()[1]
            node = Binary(op, node, self.power())
        return node

    def power(self) -> Expr:
        node = self.unary()
        if self.peek()[1] == "^":
            self.next()
            # right-associative
            return Binary("^", node, self.power())
        return node

    def unary(self) -> Expr:
        if self.peek()[1] == "-" and self.peek()[0] == "op":
            position = self.next()[2]
            self._enter(position)
            try:
                return Unary("-", self.unary())
            finally:
                self.depth -= 1
        return self.postfix()

    def postfix(self) -> Expr:
        node = self.primary()
        while True:
            kind, value, position = self.peek()
            if value == ".":
                self.next()
                kind, name, position = self.next()
                if kind != "ident":
                    raise ExprSyntaxError("expected field name after '.'", position)
                node = Field(node, name)
            elif value == "[":
                self.next()
                index = self.expression()
                self.expect("]")
                node = Index(node, index)
            else:
                return node

    def primary(self) -> Expr:
        kind, value, position = self.next()
        if kind == "number":
            if "." in value:
                return Lit(_normalize(Fraction(value)))
            return Lit(int(value))
        if kind == "string":
            return Lit(_unescape(value, position))
        if kind == "ident":
            if self.peek()[1] == "(":
                self.next()
                args: list[Expr] = []
                if self.peek()[1] != ")":
                    args.append(self.expression())
                    while self.peek()[1] == ",":
                        self.next()
                        args.append(self.expression())
                self.expect(")")
                return Call(value, tuple(args))
            return Name(value)
        if value == "(":
            node = self.expression()
            self.expect(")")
            return node
        if value == "[":
            items: list[Expr] = []
            if self.peek()[1] != "]":
                items.append(self.expression())
                while self.peek()[1] == ",":
                    self.next()
                    items.append(self.expression())
            self.expect("]")
            return ListExpr(tuple(items))
        raise ExprSyntaxError(f"unexpected token {value!r}", position)


def compile_program(source: str) -> Program:
    """Parse ``source`` into a :class:`Program`.

    Raises :class:`ExprSyntaxError` with a character offset on malformed
    input.
    """
    if not isinstance(source, str) or not source.strip():
        raise ExprSyntaxError("empty program", 0)
    ast = _Parser(_tokenize(source)).parse()
    return Program(source=source, ast=ast)


def free_names(program: Program) -> frozenset[str]:
    """Names the program reads from its input bindings."""
    found: set[str] = set()

    def walk(node: Expr) -> None:
        if isinstance(node, Name):
            found.add(node.ident)
        elif isinstance(node, ListExpr):
            for item in node.items:
                walk(item)
        elif isinstance(node, Unary):
            walk(node.operand)
        elif isinstance(node, Binary):
            walk(node.left)
            walk(node.right)
        elif isinstance(node, Field):
            walk(node.base)
        elif isinstance(node, Index):
            walk(node.base)
            walk(node.index)
        elif isinstance(node, Call):
            for arg in node.args:
                walk(arg)

    walk(program.ast)
    return frozenset(found)


def substitute(program: Program, replacements: Mapping[str, Expr]) -> Program:
    """Replace free name references with expression nodes.

    Used when a rewrite renames a node that downstream programs read, and
    when synthesizing programs from a formula over named slots.
    """

    def walk(node: Expr) -> Expr:
        if isinstance(node, Name):
            return replacements.get(node.ident, node)
        if isinstance(node, ListExpr):
            return ListExpr(tuple(walk(x) for x in node.items))
        if isinstance(node, Unary):
            return Unary(node.op, walk(node.operand))
        if isinstance(node, Binary):
            return Binary(node.op, walk(node.left), walk(node.right))
        if isinstance(node, Field):
            return Field(walk(node.base), node.name)
        if isinstance(node, Index):
            return Index(walk(node.base), walk(node.index))
        if isinstance(node, Call):
            return Call(node.func, tuple(walk(a) for a in node.args))
        return node

    return compile_program(unparse(walk(program.ast)))


def unparse(node: Expr) -> str:
    """Render an AST back to source that parses to an equal tree."""
    if isinstance(node, Lit):
        if isinstance(node.value, str):
            body = (
                node.value.replace("\\", "\\\\")
                .replace('"', '\\"')
                .replace("\n", "\\n")
                .replace("\t", "\\t")
            )
            return f'"{body}"'
        return format_number(node.value)
    if isinstance(node, Name):
        return node.ident
    if isinstance(node, ListExpr):
        return "[" + ", ".join(unparse(item) for item in node.items) + "]"
    if isinstance(node, Unary):
        return f"(-{unparse(node.operand)})"
    if isinstance(node, Binary):
        return f"({unparse(node.left)} {node.op} {unparse(node.right)})"
    if isinstance(node, Field):
        return f"{unparse(node.base)}.{node.name}"
    if isinstance(node, Index):
        return f"{unparse(node.base)}[{unparse(node.index)}]"
    if isinstance(node, Call):
        return f"{node.func}(" + ", ".join(unparse(arg) for arg in node.args) + ")"
    raise TypeError(f"not an expression node: {node!r}")


# --------------------------------------------------------------------------
# Evaluation


def _normalize(value: Number) -> Number:
    if isinstance(value, Fraction) and value.denominator == 1:
        return int(value)
    return value


def _guard(value: Number) -> Number:
    value = _normalize(value)
    num = value.numerator if isinstance(value, Fraction) else value
    den = value.denominator if isinstance(value, Fraction) else 1
    if num.bit_length() > _MAX_MAGNITUDE_BITS or den.bit_length() > _MAX_MAGNITUDE_BITS:
        raise ExprEvalError("numeric overflow")
    return value


def is_number(value: object) -> bool:
    return isinstance(value, (int, Fraction)) and not isinstance(value, bool)


def format_number(value: Number) -> str:
    value = _normalize(value)
    return str(value)


def parse_number(text: str) -> Number:
    """Parse one signed decimal, tolerating grouping commas and a leading
    currency symbol."""
    cleaned = text.strip().replace(",", "").replace("$", "")
    try:
        if "." in cleaned:
            return _normalize(Fraction(cleaned))
        return int(cleaned)
    except (ValueError, ZeroDivisionError):
        raise ExtractionError(f"not a number: {text!r}") from None


def extract_answer(text: str) -> Number:
    """Pull the numeric answer out of a model response.

    If the text contains at least one ``####`` marker, the answer is the
    first number after the last marker, scanning to the end of the text.
    Otherwise it is the final number anywhere in the text. Grouping commas
    are stripped and a leading currency symbol is ignored. Raises
    :class:`ExtractionError` when no number is found.
    """
    if not isinstance(text, str):
        raise ExprEvalError(f"extract_answer expects text, got {type(text).__name__}")
    marker = text.rfind(_ANSWER_MARKER)
    if marker >= 0:
        tail = text[marker + len(_ANSWER_MARKER):]
        match = _NUMBER_RE.search(tail)
        if match is None:
            raise ExtractionError("no number after final answer marker")
        return parse_number(match.group())
    matches = _NUMBER_RE.findall(text)
    if not matches:
        raise ExtractionError("no number in text")
    return parse_number(matches[-1])


def find_numbers(text: str) -> list[Number]:
    """All numbers in the text, in order of appearance."""
    if not isinstance(text, str):
        raise ExprEvalError(f"numbers expects text, got {type(text).__name__}")
    return [parse_number(m) for m in _NUMBER_RE.findall(text)]


def majority_vote(values: list) -> Number:
    """Strict-majority vote over numeric answers.

    Returns the value occurring strictly more than ``len(values) / 2``
    times; with no majority, returns the minimum value. Empty input is an
    error.
    """
    if not isinstance(values, list) or not values:
        raise ExprEvalError("majority_vote needs a non-empty list")
    for v in values:
        if not is_number(v):
            raise ExprEvalError("majority_vote expects numbers")
    counts: dict[Number, int] = {}
    for v in values:
        v = _normalize(v)
        counts[v] = counts.get(v, 0) + 1
    winner, top = max(counts.items(), key=lambda kv: kv[1])
    if top * 2 > len(values):
        return winner
    return _normalize(min(values))


def parse_json_text(text: str) -> Value:
    if not isinstance(text, str):
        raise ExprEvalError(f"parse_json expects text, got {type(text).__name__}")
    try:
        return json.loads(text, parse_float=lambda s: _normalize(Fraction(s)))
    except json.JSONDecodeError as exc:
        raise ExprEvalError(f"malformed json: {exc.msg}") from None


def render_text(value: Value) -> str:
    """Best-effort text rendering used by the ``text`` builtin."""
    if isinstance(value, str):
        return value
    if is_number(value):
        return format_number(value)
    return json.dumps(to_jsonable(value), sort_keys=True)


def to_jsonable(value: Value) -> object:
    """Convert a runtime value into plain JSON-serializable data.

    Non-integral rationals become ``"p/q"`` strings so exactness survives a
    round trip through JSON.
    """
    if isinstance(value, bool) or value is None or isinstance(value, str):
        return value
    if isinstance(value, int):
        return value
    if isinstance(value, Fraction):
        value = _normalize(value)
        return value if isinstance(value, int) else f"{value.numerator}/{value.denominator}"
    if isinstance(value, list):
        return [to_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    raise TypeError(f"not a plan value: {type(value).__name__}")


_BUILTINS = {
    "extract_answer": (1, lambda args: extract_answer(args[0])),
    "majority_vote": (1, lambda args: majority_vote(args[0])),
    "parse_json": (1, lambda args: parse_json_text(args[0])),
    "numbers": (1, lambda args: find_numbers(args[0])),
    "text": (1, lambda args: render_text(args[0])),
}

BUILTIN_NAMES = frozenset(_BUILTINS)


def _arith(op: str, left: Value, right: Value) -> Value:
    if op == "+" and isinstance(left, str) and isinstance(right, str):
        return left + right
    if not is_number(left) or not is_number(right):
        raise ExprEvalError(
            f"operator {op!r} expects numbers, got "
            f"{type(left).__name__} and {type(right).__name__}"
        )
    if op == "+":
        return _guard(Fraction(left) + Fraction(right))
    if op == "-":
        return _guard(Fraction(left) - Fraction(right))
    if op == "*":
        return _guard(Fraction(left) * Fraction(right))
    if op == "/":
        if right == 0:
            raise ExprEvalError("division by zero")
        return _guard(Fraction(left) / Fraction(right))
    if op == "%":
        if right == 0:
            raise ExprEvalError("modulo by zero")
        return _guard(Fraction(left) % Fraction(right))
    if op == "^":
        exponent = _normalize(right)
        if not isinstance(exponent, int):
            raise ExprEvalError("exponent must be an integer")
        if abs(exponent) > _MAX_EXPONENT:
            raise ExprEvalError("numeric overflow")
        if left == 0 and exponent < 0:
            raise ExprEvalError("division by zero")
        return _guard(Fraction(left) ** exponent)
    raise ExprEvalError(f"unknown operator {op!r}")


def _compare(op: str, left: Value, right: Value) -> int:
    if op in ("==", "!="):
        if is_number(left) and is_number(right):
            equal = Fraction(left) == Fraction(right)
        else:
            equal = type(left) is type(right) and left == right
        return int(equal if op == "==" else not equal)
    if is_number(left) and is_number(right):
        pass
    elif isinstance(left, str) and isinstance(right, str):
        pass
    else:
        raise ExprEvalError(f"operator {op!r} cannot order these values")
    result = {
        "<": left < right,
        "<=": left <= right,
        ">": left > right,
        ">=": left >= right,
    }[op]
    return int(result)


def _eval(node: Expr, bindings: Mapping[str, Value]) -> Value:
    if isinstance(node, Lit):
        return node.value
    if isinstance(node, Name):
        if node.ident not in bindings:
            raise ExprEvalError(f"unbound name {node.ident!r}")
        return bindings[node.ident]
    if isinstance(node, ListExpr):
        return [_eval(item, bindings) for item in node.items]
    if isinstance(node, Unary):
        operand = _eval(node.operand, bindings)
        if not is_number(operand):
            raise ExprEvalError("unary '-' expects a number")
        return _guard(-Fraction(operand))
    if isinstance(node, Binary):
        left = _eval(node.left, bindings)
        right = _eval(node.right, bindings)
        if node.op in _COMPARE_OPS:
            return _compare(node.op, left, right)
        return _arith(node.op, left, right)
    if isinstance(node, Field):
        base = _eval(node.base, bindings)
        if not isinstance(base, dict):
            raise ExprEvalError(f"field access on {type(base).__name__}")
        if node.name not in base:
            raise ExprEvalError(f"unknown field {node.name!r}")
        return base[node.name]
    if isinstance(node, Index):
        base = _eval(node.base, bindings)
        index = _eval(node.index, bindings)
        if isinstance(base, dict):
            if not isinstance(index, str):
                raise ExprEvalError("object index must be text")
            if index not in base:
                raise ExprEvalError(f"unknown field {index!r}")
            return base[index]
        if isinstance(base, (list, str)):
            index = _normalize(index) if is_number(index) else index
            if not isinstance(index, int):
                raise ExprEvalError("index must be an integer")
            if not 0 <= index < len(base):
                raise ExprEvalError(f"index {index} out of range")
            return base[index]
        raise ExprEvalError(f"cannot index {type(base).__name__}")
    if isinstance(node, Call):
        if node.func not in _BUILTINS:
            raise ExprEvalError(f"unknown function {node.func!r}")
        arity, impl = _BUILTINS[node.func]
        if len(node.args) != arity:
            raise ExprEvalError(
                f"{node.func} takes {arity} argument(s), got {len(node.args)}"
            )
        return impl([_eval(arg, bindings) for arg in node.args])
    raise TypeError(f"not an expression node: {node!r}")


def eval_program(program: Program | str, bindings: Mapping[str, Value] | None = None) -> Value:
    """Evaluate a program against named input bindings.

    Accepts either a compiled :class:`Program` or raw source. Evaluation is
    deterministic and total: any failure raises a typed
    :class:`ExprEvalError` rather than diverging.
    """
    if isinstance(program, str):
        program = compile_program(program)
    result = _eval(program.ast, bindings or {})
    if is_number(result):
        return _normalize(result)
    return result
