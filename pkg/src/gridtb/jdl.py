"""Job Description Language: a small ClassAd-like attribute language.

    Executable = "sim";
    VirtualOrganisation = "atlas";
    Requirements = other.FreeCPUs > 0 && other.Site != "ral";
    Rank = -other.EstimatedTraversalTime;

Statements are ``Name = expression`` separated by ``;``. Expressions use
``== != < <= > >= && || ! + - * /`` over attribute references, integers and
double-quoted strings. ``other.X`` refers to the candidate resource, a bare
name (or ``self.X``) to the job itself. Missing attributes evaluate to
UNDEFINED, which propagates through the Kleene three-valued logic.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Union


class JdlError(Exception):
    pass


class JdlParseError(JdlError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class JdlTypeError(JdlError):
    """Raised while evaluating an ill-typed expression."""


class _Undefined:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "UNDEFINED"

    def __bool__(self) -> bool:
        raise JdlTypeError("UNDEFINED has no truth value")


UNDEFINED = _Undefined()
Value = Union[int, str, bool, _Undefined]


# -- syntax tree ---------------------------------------------------------------


@dataclass(frozen=True)
class Literal:
    value: Any


@dataclass(frozen=True)
class AttrRef:
    scope: str  # "self" or "other"
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    operand: Any


@dataclass(frozen=True)
class Binary:
    op: str
    left: Any
    right: Any


Expr = Union[Literal, AttrRef, Unary, Binary]

# -- lexer ---------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<int>[0-9]+)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)?)
  | (?P<op>==|!=|<=|>=|&&|\|\||[<>!+\-*/()=;])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    column: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        col = pos - line_start + 1
        if m is None:
            if text[pos] == '"':
                raise JdlParseError("unterminated string", line, col)
            raise JdlParseError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        chunk = m.group()
        if kind != "ws":
            tokens.append(Token(kind, chunk, line, col))
        newlines = chunk.count("\n")
        if newlines:
            line += newlines
            line_start = pos + chunk.rindex("\n") + 1
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


def _unquote(text: str) -> str:
    return re.sub(r"\\(.)", r"\1", text[1:-1])


# -- parser --------------------------------------------------------------------

_COMPARISONS = ("==", "!=", "<", "<=", ">", ">=")


class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.pos = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def error(self, message: str, tok: Optional[Token] = None):
        tok = tok or self.tok
        found = "end of input" if tok.kind == "eof" else repr(tok.text)
        return JdlParseError(f"{message}, found {found}", tok.line, tok.column)

    def accept(self, *ops: str) -> Optional[Token]:
        tok = self.tok
        if tok.kind == "op" and tok.text in ops:
            self.pos += 1
            return tok
        return None

    def expect(self, op: str) -> Token:
        tok = self.accept(op)
        if tok is None:
            raise self.error(f"expected {op!r}")
        return tok

    def statements(self) -> list[tuple[Token, Expr]]:
        out = []
        while self.tok.kind != "eof":
            if self.accept(";"):
                continue
            name = self.tok
            if name.kind != "name" or "." in name.text:
                raise self.error("expected attribute name")
            self.pos += 1
            self.expect("=")
            out.append((name, self.expression()))
            if self.tok.kind != "eof":
                self.expect(";")
        return out

    def expression(self) -> Expr:
        return self.disjunction()

    def disjunction(self) -> Expr:
        left = self.conjunction()
        while self.accept("||"):
            left = Binary("||", left, self.conjunction())
        return left

    def conjunction(self) -> Expr:
        left = self.comparison()
        while self.accept("&&"):
            left = Binary("&&", left, self.comparison())
        return left

    def comparison(self) -> Expr:
        left = self.additive()
        tok = self.accept(*_COMPARISONS)
        if tok is not None:
            left = Binary(tok.text, left, self.additive())
            if self.tok.kind == "op" and self.tok.text in _COMPARISONS:
                raise self.error("comparisons do not chain")
        return left

    def additive(self) -> Expr:
        left = self.multiplicative()
        while (tok := self.accept("+", "-")) is not None:
            left = Binary(tok.text, left, self.multiplicative())
        return left

    def multiplicative(self) -> Expr:
        left = self.unary()
        while (tok := self.accept("*", "/")) is not None:
            left = Binary(tok.text, left, self.unary())
        return left

    def unary(self) -> Expr:
        tok = self.accept("!", "-", "+")
        if tok is not None:
            return Unary(tok.text, self.unary())
        return self.primary()

    def primary(self) -> Expr:
        tok = self.tok
        if tok.kind == "int":
            self.pos += 1
            return Literal(int(tok.text))
        if tok.kind == "string":
            self.pos += 1
            return Literal(_unquote(tok.text))
        if tok.kind == "name":
            self.pos += 1
            lowered = tok.text.lower()
            if lowered in ("true", "false"):
                return Literal(lowered == "true")
            if "." in tok.text:
                scope, name = tok.text.split(".", 1)
                if scope.lower() not in ("self", "other"):
                    raise JdlParseError(f"unknown scope {scope!r}", tok.line, tok.column)
                return AttrRef(scope.lower(), name)
            return AttrRef("self", tok.text)
        if self.accept("("):
            inner = self.expression()
            self.expect(")")
            return inner
        raise self.error("expected expression")


def parse_expression(text: str) -> Expr:
    parser = _Parser(text)
    expr = parser.expression()
    if parser.tok.kind != "eof":
        raise parser.error("trailing input")
    return expr


# -- evaluation ----------------------------------------------------------------


def _lookup(attrs: Mapping[str, Any], name: str) -> Value:
    if name in attrs:
        return attrs[name]
    lowered = name.lower()
    for key, value in attrs.items():
        if key.lower() == lowered:
            return value
    return UNDEFINED


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _type_name(v: Any) -> str:
    if v is UNDEFINED:
        return "undefined"
    return {bool: "boolean", int: "integer", str: "string"}.get(type(v), type(v).__name__)


def _logical(v: Value, op: str) -> Value:
    if v is UNDEFINED or isinstance(v, bool):
        return v
    raise JdlTypeError(f"operand of {op} must be boolean, got {_type_name(v)}")


def evaluate(expr: Expr, own: Mapping[str, Any], other: Mapping[str, Any]) -> Value:
    if isinstance(expr, Literal):
        return expr.value
    if isinstance(expr, AttrRef):
        scope = own if expr.scope == "self" else other
        value = _lookup(scope, expr.name)
        if expr.scope == "self" and not isinstance(value, (int, str, bool, _Undefined)):
            value = evaluate(value, own, other)
        return value
    if isinstance(expr, Unary):
        v = evaluate(expr.operand, own, other)
        if expr.op == "!":
            v = _logical(v, "!")
            return v if v is UNDEFINED else not v
        if v is UNDEFINED:
            return v
        if not _is_int(v):
            raise JdlTypeError(f"unary {expr.op} needs an integer, got {_type_name(v)}")
        return -v if expr.op == "-" else v
    op = expr.op
    if op in ("&&", "||"):
        left = _logical(evaluate(expr.left, own, other), op)
        if op == "&&" and left is False:
            return False
        if op == "||" and left is True:
            return True
        right = _logical(evaluate(expr.right, own, other), op)
        if op == "&&":
            if right is False:
                return False
            return UNDEFINED if UNDEFINED in (left, right) else True
        if right is True:
            return True
        return UNDEFINED if UNDEFINED in (left, right) else False
    left = evaluate(expr.left, own, other)
    right = evaluate(expr.right, own, other)
    if left is UNDEFINED or right is UNDEFINED:
        return UNDEFINED
    if op in ("+", "-", "*", "/"):
        if not (_is_int(left) and _is_int(right)):
            raise JdlTypeError(f"{_type_name(left)} {op} {_type_name(right)}")
        if op == "+":
            return left + right
        if op == "-":
            return left - right
        if op == "*":
            return left * right
        if right == 0:
            raise JdlTypeError("division by zero")
        quotient = abs(left) // abs(right)
        return quotient if (left >= 0) == (right >= 0) else -quotient
    if type(left) is not type(right):
        raise JdlTypeError(f"cannot compare {_type_name(left)} with {_type_name(right)}")
    if op == "==":
        return left == right
    if op == "!=":
        return left != right
    if not _is_int(left):
        raise JdlTypeError(f"ordering comparison {op} on {_type_name(left)}")
    return {"<": left < right, "<=": left <= right, ">": left > right, ">=": left >= right}[op]


# -- job ads -------------------------------------------------------------------

DEFAULT_RANK = parse_expression("-other.EstimatedTraversalTime")
TRUE = Literal(True)


@dataclass
class JobAd:
    executable: Optional[str] = None
    arguments: str = ""
    virtual_organisation: Optional[str] = None
    requirements: Expr = TRUE
    rank: Expr = DEFAULT_RANK
    input_data: list[str] = field(default_factory=list)
    walltime_s: int = 0
    attributes: dict[str, Expr] = field(default_factory=dict)

    def own_attributes(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for name, expr in self.attributes.items():
            out[name] = expr.value if isinstance(expr, Literal) else expr
        return out

    def validate(self) -> list[str]:
        errors = []
        if not self.virtual_organisation:
            errors.append("VirtualOrganisation is required")
        declared = {name.lower() for name in self.attributes}
        for label, expr in (("Requirements", self.requirements), ("Rank", self.rank)):
            for ref in _refs(expr):
                if ref.scope == "self" and ref.name.lower() not in declared:
                    errors.append(f"{label} references undeclared attribute {ref.name}")
        return errors

    def matches(self, resource: Mapping[str, Any]) -> bool:
        """Requirements must evaluate to exactly ``true``."""
        return evaluate(self.requirements, self.own_attributes(), resource) is True

    def rank_of(self, resource: Mapping[str, Any]) -> Optional[int]:
        value = evaluate(self.rank, self.own_attributes(), resource)
        if value is UNDEFINED:
            return None
        if not _is_int(value):
            raise JdlTypeError(f"Rank must be an integer, got {_type_name(value)}")
        return value


def _refs(expr: Expr):
    if isinstance(expr, AttrRef):
        yield expr
    elif isinstance(expr, Unary):
        yield from _refs(expr.operand)
    elif isinstance(expr, Binary):
        yield from _refs(expr.left)
        yield from _refs(expr.right)


_STRING_FIELDS = {"executable": "executable", "arguments": "arguments", "virtualorganisation": "virtual_organisation"}


def parse_jdl(text: str) -> JobAd:
    ad = JobAd()
    for name_tok, expr in _Parser(text).statements():
        name = name_tok.text
        key = name.lower()
        if key in ad_keys(ad):
            raise JdlParseError(f"duplicate attribute {name}", name_tok.line, name_tok.column)
        ad.attributes[name] = expr
        if key in _STRING_FIELDS:
            if not (isinstance(expr, Literal) and isinstance(expr.value, str)):
                raise JdlParseError(f"{name} must be a string literal", name_tok.line, name_tok.column)
            setattr(ad, _STRING_FIELDS[key], expr.value)
        elif key == "requirements":
            ad.requirements = expr
        elif key == "rank":
            ad.rank = expr
    return ad


def ad_keys(ad: JobAd) -> set[str]:
    return {k.lower() for k in ad.attributes}
