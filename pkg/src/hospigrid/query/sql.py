"""Query translation to a single SELECT statement, and the local handler
that evaluates such statements against a site's relations.

The dialect is deliberately small: ``SELECT cols FROM t [JOIN u ON a = b]...
[WHERE expr]`` where ``expr`` combines ``col <op> ?`` comparisons with AND,
OR and parentheses. ``CONTAINS`` is a substring test.
"""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass

from ..catalog import SCHEMA, TableSchema
from ..errors import InvalidLiteral, QueryError, SchemaMismatch, UnknownColumn, UnknownTable
from .doc import And, Atom, Or, Predicate, QueryDoc, check_depth
from .results import ResultSet


@dataclass(frozen=True)
class SqlPlan:
    statement: str
    parameters: tuple[str, ...] = ()


def resolve_column(ref: str, tables: list[str], schema: dict[str, TableSchema]) -> tuple[str, str]:
    """Resolve ``table.col`` or a bare ``col`` (first table in FROM/JOIN order
    that has it) to a (table, column) pair."""
    if "." in ref:
        table, _, col = ref.partition(".")
        if table not in tables:
            raise UnknownTable(f"{table} is not part of the query")
        if schema[table].column(col) is None:
            raise UnknownColumn(ref)
        return table, col
    for table in tables:
        if schema[table].column(ref) is not None:
            return table, ref
    raise UnknownColumn(ref)


def _coerce_literal(literal: str, type_: str, op: str, ref: str):
    if type_ == "INTEGER" and op != "CONTAINS":
        try:
            return int(literal.strip())
        except ValueError:
            raise InvalidLiteral(f"{ref} expects an integer, got {literal!r}") from None
    return literal


def translate_query(doc: QueryDoc, schema: dict[str, TableSchema] = SCHEMA) -> SqlPlan:
    if doc.table not in schema:
        raise UnknownTable(doc.table)
    tables = [doc.table]
    join_sql = []
    for j in doc.joins:
        if j.table not in schema:
            raise UnknownTable(j.table)
        if j.table in tables:
            raise QueryError(f"table {j.table} appears twice")
        lt, lc = resolve_column(j.left_column, tables, schema)
        rt, rc = resolve_column(j.right_column, [j.table], schema)
        tables.append(j.table)
        join_sql.append(f" JOIN {j.table} ON {lt}.{lc} = {rt}.{rc}")
    for col in doc.select:
        resolve_column(col, tables, schema)
    check_depth(doc.predicate)

    params: list[str] = []

    def render(p: Predicate, parent: type | None = None, right: bool = False) -> str:
        if isinstance(p, Atom):
            table, col = resolve_column(p.column, tables, schema)
            _coerce_literal(p.literal, schema[table].column(col).type, p.op, p.column)
            params.append(p.literal)
            return f"{p.column} {p.op} ?"
        word = "AND" if isinstance(p, And) else "OR"
        text = f"{render(p.left, type(p))} {word} {render(p.right, type(p), True)}"
        if parent is not None and (parent is not type(p) or right):
            text = f"({text})"
        return text

    stmt = f"SELECT {', '.join(doc.select)} FROM {doc.table}" + "".join(join_sql)
    if doc.predicate is not None:
        stmt += " WHERE " + render(doc.predicate)
    return SqlPlan(stmt, tuple(params))


# ---------------------------------------------------------------- statement parser

_TOKEN = re.compile(r"\s*(?:(<=|>=|!=|=|<|>|\(|\)|,|\?)|([A-Za-z_][A-Za-z0-9_.]*))")
_KEYWORDS = {"SELECT", "FROM", "JOIN", "ON", "WHERE", "AND", "OR", "CONTAINS"}


def _tokenize(stmt: str) -> list[str]:
    pos, out = 0, []
    stmt = stmt.rstrip()
    while pos < len(stmt):
        m = _TOKEN.match(stmt, pos)
        if not m or m.end() == pos:
            raise QueryError(f"cannot tokenize statement at {pos}: {stmt[pos:pos + 20]!r}")
        out.append(m.group(1) or m.group(2))
        pos = m.end()
    return out


@dataclass(frozen=True)
class _Cmp:
    column: str
    op: str
    param: int


@dataclass(frozen=True)
class _Bool:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class ParsedSelect:
    columns: tuple[str, ...]
    table: str
    joins: tuple[tuple[str, str, str], ...]  # (table, left ref, right ref)
    where: object | None
    n_params: int


def parse_statement(stmt: str) -> ParsedSelect:
    toks = _tokenize(stmt)
    pos = 0
    n_params = 0

    def peek():
        return toks[pos] if pos < len(toks) else None

    def expect(word=None):
        nonlocal pos
        tok = peek()
        if tok is None or (word is not None and tok != word):
            raise QueryError(f"expected {word or 'token'} at token {pos}, got {tok!r}")
        pos += 1
        return tok

    def ident():
        tok = expect()
        if tok in _KEYWORDS or not re.match(r"[A-Za-z_]", tok):
            raise QueryError(f"expected identifier, got {tok!r}")
        return tok

    expect("SELECT")
    cols = [ident()]
    while peek() == ",":
        expect(",")
        cols.append(ident())
    expect("FROM")
    table = ident()
    joins = []
    while peek() == "JOIN":
        expect("JOIN")
        jt = ident()
        expect("ON")
        left = ident()
        expect("=")
        right = ident()
        joins.append((jt, left, right))

    def primary():
        nonlocal n_params
        if peek() == "(":
            expect("(")
            node = disjunct()
            expect(")")
            return node
        col = ident()
        op = expect()
        if op not in ("=", "!=", "<", "<=", ">", ">=", "CONTAINS"):
            raise QueryError(f"unknown operator {op!r}")
        expect("?")
        n_params += 1
        return _Cmp(col, op, n_params - 1)

    def conjunct():
        node = primary()
        while peek() == "AND":
            expect("AND")
            node = _Bool("AND", node, primary())
        return node

    def disjunct():
        node = conjunct()
        while peek() == "OR":
            expect("OR")
            node = _Bool("OR", node, conjunct())
        return node

    where = None
    if peek() == "WHERE":
        expect("WHERE")
        where = disjunct()
    if peek() is not None:
        raise QueryError(f"trailing tokens in statement: {toks[pos:]}")
    return ParsedSelect(tuple(cols), table, tuple(joins), where, n_params)


# ---------------------------------------------------------------- local execution


def _compare(value, op: str, literal) -> bool:
    if op == "CONTAINS":
        return str(literal) in str(value)
    if op == "=":
        return value == literal
    if op == "!=":
        return value != literal
    if op == "<":
        return value < literal
    if op == "<=":
        return value <= literal
    if op == ">":
        return value > literal
    return value >= literal


def execute_local(plan: SqlPlan, db, site: str = "") -> ResultSet:
    """Evaluate ``plan`` against one site's relations.

    ``db`` is anything with ``schema`` and ``rows(table)`` (rows already in
    ascending primary-key order), e.g. a LocalDatabase or one of its views.
    Output rows follow the driving table's primary key; values are rendered
    as text.
    """
    schema = db.schema
    try:
        parsed = parse_statement(plan.statement)
    except QueryError as exc:
        raise SchemaMismatch(str(exc)) from None
    if parsed.n_params != len(plan.parameters):
        raise SchemaMismatch(f"statement has {parsed.n_params} placeholders, got {len(plan.parameters)} parameters")
    try:
        if parsed.table not in schema:
            raise UnknownTable(parsed.table)
        tables = [parsed.table]
        join_specs = []
        for jt, left, right in parsed.joins:
            if jt not in schema:
                raise UnknownTable(jt)
            join_specs.append((resolve_column(left, tables, schema), resolve_column(right, [jt], schema)))
            tables.append(jt)
        projection = [resolve_column(c, tables, schema) for c in parsed.columns]

        def bind(node):
            if isinstance(node, _Cmp):
                t, c = resolve_column(node.column, tables, schema)
                lit = _coerce_literal(plan.parameters[node.param], schema[t].column(c).type, node.op, node.column)
                return ("cmp", t, c, node.op, lit)
            return (node.op, bind(node.left), bind(node.right))

        where = bind(parsed.where) if parsed.where is not None else None
    except QueryError as exc:
        raise SchemaMismatch(str(exc)) from None

    def holds(node, combo) -> bool:
        if node[0] == "cmp":
            _, t, c, op, lit = node
            return _compare(combo[t][c], op, lit)
        if node[0] == "AND":
            return holds(node[1], combo) and holds(node[2], combo)
        return holds(node[1], combo) or holds(node[2], combo)

    combos = [{parsed.table: r} for r in db.rows(parsed.table)]
    for (lt, lc), (rt, rc) in join_specs:
        index = defaultdict(list)
        for r in db.rows(rt):
            index[r[rc]].append(r)
        combos = [dict(combo, **{rt: r}) for combo in combos for r in index.get(combo[lt][lc], ())]
    rows = tuple(
        tuple(str(combo[t][c]) for t, c in projection)
        for combo in combos
        if where is None or holds(where, combo)
    )
    return ResultSet(tuple(parsed.columns), rows, site)
