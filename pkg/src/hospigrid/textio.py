"""Tab-separated field escaping shared by the line-oriented formats."""

from __future__ import annotations

_ESC = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_UNESC = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}


def escape(value: str) -> str:
    if not any(c in value for c in _ESC):
        return value
    return "".join(_ESC.get(c, c) for c in value)


def unescape(value: str) -> str:
    if "\\" not in value:
        return value
    out = []
    it = iter(value)
    for c in it:
        if c == "\\":
            nxt = next(it, "")
            if nxt not in _UNESC:
                raise ValueError(f"bad escape \\{nxt} in {value!r}")
            out.append(_UNESC[nxt])
        else:
            out.append(c)
    return "".join(out)


def join_fields(fields) -> str:
    return "\t".join(escape(str(f)) for f in fields)


def split_fields(line: str) -> list[str]:
    return [unescape(f) for f in line.split("\t")]
