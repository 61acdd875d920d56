"""Client query documents and their line-oriented wire form.

Wire form::

    QRY <Local|Global> <table>
    SEL <col>,<col>,...
    JOIN <table> <left-col> <right-col>      (zero or more)
    AND | OR | ATOM <col> <op> <literal>     (predicate, prefix order)
    END
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

from ..errors import DepthExceeded, MalformedDocument

OPS = ("=", "!=", "<", "<=", ">", ">=", "CONTAINS")
SCOPES = ("Local", "Global")
MAX_DEPTH = 16


@dataclass(frozen=True)
class Atom:
    column: str
    op: str
    literal: str

    def __post_init__(self):
        if self.op not in OPS:
            raise MalformedDocument(f"unknown operator {self.op!r}")
        if "\n" in self.literal or "\r" in self.literal:
            raise MalformedDocument("literal may not contain line breaks")


@dataclass(frozen=True)
class And:
    left: "Predicate"
    right: "Predicate"


@dataclass(frozen=True)
class Or:
    left: "Predicate"
    right: "Predicate"


Predicate = Union[Atom, And, Or]


@dataclass(frozen=True)
class Join:
    table: str
    left_column: str
    right_column: str


@dataclass(frozen=True)
class QueryDoc:
    scope: str
    select: tuple[str, ...]
    table: str
    predicate: Predicate | None = None
    joins: tuple[Join, ...] = ()

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise MalformedDocument(f"scope must be Local or Global, not {self.scope!r}")
        object.__setattr__(self, "select", tuple(self.select))
        object.__setattr__(self, "joins", tuple(self.joins))
        if not self.select:
            raise MalformedDocument("select list is empty")

    def with_scope(self, scope: str) -> "QueryDoc":
        return QueryDoc(scope, self.select, self.table, self.predicate, self.joins)


def conjunction(*preds: Predicate) -> Predicate | None:
    """Left-nested AND of ``preds`` (None when empty)."""
    out = None
    for p in preds:
        out = p if out is None else And(out, p)
    return out


def disjunction(*preds: Predicate) -> Predicate | None:
    out = None
    for p in preds:
        out = p if out is None else Or(out, p)
    return out


def depth(pred: Predicate | None) -> int:
    if pred is None:
        return 0
    stack = [(pred, 1)]
    deepest = 0
    while stack:
        node, d = stack.pop()
        deepest = max(deepest, d)
        if d > MAX_DEPTH:
            return d
        if not isinstance(node, Atom):
            stack.append((node.left, d + 1))
            stack.append((node.right, d + 1))
    return deepest


def atoms(pred: Predicate | None) -> list[Atom]:
    """Atoms in depth-first, left-to-right order."""
    if pred is None:
        return []
    if isinstance(pred, Atom):
        return [pred]
    return atoms(pred.left) + atoms(pred.right)


def check_depth(pred: Predicate | None) -> None:
    d = depth(pred)
    if d > MAX_DEPTH:
        raise DepthExceeded(f"predicate depth {d} exceeds {MAX_DEPTH}")


def _check_word(word: str, what: str) -> str:
    if not word or any(c in word for c in " \t\n\r,"):
        raise MalformedDocument(f"bad {what} {word!r}")
    return word


def serialize_query(doc: QueryDoc) -> str:
    lines = [
        f"QRY {doc.scope} {_check_word(doc.table, 'table')}",
        "SEL " + ",".join(_check_word(c, "column") for c in doc.select),
    ]
    for j in doc.joins:
        lines.append(f"JOIN {_check_word(j.table, 'table')} "
                     f"{_check_word(j.left_column, 'column')} {_check_word(j.right_column, 'column')}")

    def emit(p):
        if isinstance(p, Atom):
            lines.append(f"ATOM {_check_word(p.column, 'column')} {p.op} {p.literal}")
        else:
            lines.append("AND" if isinstance(p, And) else "OR")
            emit(p.left)
            emit(p.right)

    if doc.predicate is not None:
        check_depth(doc.predicate)
        emit(doc.predicate)
    lines.append("END")
    return "".join(line + "\n" for line in lines)


def parse_query(text: str) -> QueryDoc:
    if not text.endswith("END\n"):
        raise MalformedDocument("query document must end with END")
    lines = text[:-1].split("\n")
    if len(lines) < 3:
        raise MalformedDocument("truncated query document")
    head = lines[0].split(" ")
    if len(head) != 3 or head[0] != "QRY":
        raise MalformedDocument(f"bad header {lines[0]!r}")
    _, scope, table = head
    if not lines[1].startswith("SEL "):
        raise MalformedDocument("missing SEL line")
    select = tuple(lines[1][4:].split(","))
    i = 2
    joins = []
    while lines[i].startswith("JOIN "):
        parts = lines[i].split(" ")
        if len(parts) != 4:
            raise MalformedDocument(f"bad JOIN line {lines[i]!r}")
        joins.append(Join(*parts[1:]))
        i += 1
    body = lines[i:-1]
    if lines[-1] != "END":
        raise MalformedDocument("missing END")

    pos = 0

    def take(d: int) -> Predicate:
        nonlocal pos
        if d > MAX_DEPTH:
            raise DepthExceeded(f"predicate depth exceeds {MAX_DEPTH}")
        if pos >= len(body):
            raise MalformedDocument("predicate ends early")
        tok = body[pos]
        pos += 1
        if tok in ("AND", "OR"):
            left = take(d + 1)
            right = take(d + 1)
            return And(left, right) if tok == "AND" else Or(left, right)
        if tok.startswith("ATOM "):
            parts = tok.split(" ", 3)
            if len(parts) < 3:
                raise MalformedDocument(f"bad ATOM line {tok!r}")
            literal = parts[3] if len(parts) == 4 else ""
            return Atom(parts[1], parts[2], literal)
        raise MalformedDocument(f"unexpected token {tok!r}")

    predicate = take(1) if body else None
    if pos != len(body):
        raise MalformedDocument("trailing predicate tokens")
    return QueryDoc(scope, select, table, predicate, tuple(joins))
