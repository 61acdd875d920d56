"""Result sets, the merge step of global queries, and the result document.

Result document::

    RES <ncols> <nrows> <dedup_count>
    <col>\\t<col>...
    <value>\\t<value>...   (one line per row; \\, tab, CR, LF escaped)
    END
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import ColumnMismatch, MalformedDocument
from ..textio import join_fields, split_fields


@dataclass(frozen=True)
class ResultSet:
    columns: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...] = ()
    origin_site: str = ""
    dedup_count: int = 0
    contributing_sites: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "rows", tuple(tuple(r) for r in self.rows))
        for r in self.rows:
            if len(r) != len(self.columns):
                raise ColumnMismatch(f"row arity {len(r)} != {len(self.columns)} columns")

    def __len__(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class ResultDoc:
    text: str
    contributing_sites: tuple[str, ...] = ()
    dedup_count: int = 0


def dedup_key_index(columns) -> int | None:
    """Column used to recognise replicated records: guid, else lfn."""
    bases = [c.rpartition(".")[2] for c in columns]
    for name in ("guid", "lfn"):
        if name in bases:
            return bases.index(name)
    return None


def merge_results(parts, columns=None, origin_site: str = "") -> ResultSet:
    parts = list(parts)
    if columns is None:
        if not parts:
            raise ValueError("merge of zero parts needs explicit columns")
        columns = parts[0].columns
    columns = tuple(columns)
    for p in parts:
        if p.columns != columns:
            raise ColumnMismatch(f"{p.origin_site}: {p.columns} != {columns}")
    key_at = dedup_key_index(columns)
    seen = set()
    rows = []
    removed = 0
    for p in parts:
        for row in p.rows:
            key = row[key_at] if key_at is not None else row
            if key in seen:
                removed += 1
                continue
            seen.add(key)
            rows.append(row)
    if columns:
        rows.sort(key=lambda r: r[0].encode("utf-8"))
    sites = tuple(dict.fromkeys(s for p in parts for s in (p.contributing_sites or (p.origin_site,))))
    return ResultSet(columns, tuple(rows), origin_site,
                     dedup_count=removed + sum(p.dedup_count for p in parts),
                     contributing_sites=sites)


def translate_results(rs: ResultSet) -> ResultDoc:
    lines = [f"RES {len(rs.columns)} {len(rs.rows)} {rs.dedup_count}", join_fields(rs.columns)]
    lines.extend(join_fields(r) for r in rs.rows)
    lines.append("END")
    return ResultDoc("".join(line + "\n" for line in lines),
                     rs.contributing_sites or ((rs.origin_site,) if rs.origin_site else ()),
                     rs.dedup_count)


def parse_result_doc(text: str, origin_site: str = "") -> ResultSet:
    if not text.endswith("END\n"):
        raise MalformedDocument("result document must end with END")
    lines = text[:-1].split("\n")
    head = lines[0].split(" ")
    if len(head) != 4 or head[0] != "RES":
        raise MalformedDocument(f"bad result header {lines[0]!r}")
    try:
        ncols, nrows, dedup = (int(x) for x in head[1:])
    except ValueError:
        raise MalformedDocument(f"bad result header {lines[0]!r}") from None
    if len(lines) != nrows + 3:
        raise MalformedDocument(f"expected {nrows} rows, found {len(lines) - 3}")

    def fields(line: str) -> tuple[str, ...]:
        vals = tuple(split_fields(line)) if ncols else ()
        if ncols and len(vals) != ncols:
            raise MalformedDocument(f"expected {ncols} fields in {line!r}")
        if not ncols and line:
            raise MalformedDocument("fields present in zero-column result")
        return vals

    columns = fields(lines[1])
    rows = tuple(fields(line) for line in lines[2:2 + nrows])
    return ResultSet(columns, rows, origin_site, dedup_count=dedup)
