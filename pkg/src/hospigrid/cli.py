"""Clinician console and batch runner.

Each console command maps onto one grid operation and prints a
tab-separated table with a header line. Scripts add ``expect`` lines that
assert on the outcome of the command before them::

    login alice
    import synth:7
    query global images modality=MG and density>=3 select image_id,lfn
    expect rows 4
"""

from __future__ import annotations

import argparse
import os
import re
import shlex
import sys
import threading
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path

from .errors import CommandSyntax, HospigridError, NoSession, SiteUnavailable
from .federation import Topology, load_topology, parse_topology
from .grid import Grid
from .jobs import KINDS, DataLocalPolicy, RandomPolicy, report_tsv, workload_report
from .query import Atom, Join, QueryDoc, conjunction, disjunction
from .catalog import SCHEMA
from .synth import parse_synth_spec

COMMANDS = ("login", "import", "query", "mirror", "get", "cat", "submit", "jobs", "audit",
            "topology", "quit", "expect")
DEFAULT_TOPOLOGY = "@p1_5"
_COND = re.compile(r"([A-Za-z_][A-Za-z0-9_.]*)(<=|>=|!=|=|<|>)(.*)", re.S)
_OPS = ("=", "!=", "<", "<=", ">", ">=")


class AssertionFailed(Exception):
    def __init__(self, line: int, detail: str):
        super().__init__(f"line {line}: {detail}")
        self.line = line
        self.detail = detail


# ---------------------------------------------------------------- grammar


def parse_query_args(args: list[str]) -> QueryDoc:
    """``<local|global> <table> [conditions] [join t on l=r]... [select c,...]``.

    Conditions are ``col<op>value`` or ``col contains value`` joined by
    ``and``/``or``; ``and`` binds tighter than ``or``.
    """
    if len(args) < 2:
        raise CommandSyntax("query needs a scope and a table")
    scope = {"local": "Local", "global": "Global"}.get(args[0].lower())
    if scope is None:
        raise CommandSyntax(f"scope must be local or global, not {args[0]!r}")
    table, rest = args[1], args[2:]
    disjuncts: list[list[Atom]] = [[]]
    joins: list[Join] = []
    select: tuple[str, ...] = ()
    i = 0
    expect_term = True
    while i < len(rest):
        word = rest[i]
        low = word.lower()
        if low == "join":
            if i + 3 >= len(rest) or rest[i + 2].lower() != "on":
                raise CommandSyntax("join needs: join <table> on <left>=<right>")
            m = _COND.fullmatch(rest[i + 3])
            if not m or m.group(2) != "=":
                raise CommandSyntax(f"bad join condition {rest[i + 3]!r}")
            joins.append(Join(rest[i + 1], m.group(1), m.group(3)))
            i += 4
        elif low == "select":
            if i + 1 >= len(rest):
                raise CommandSyntax("select needs a column list")
            select = tuple(c for c in rest[i + 1].split(",") if c)
            i += 2
        elif low in ("and", "or"):
            if expect_term:
                raise CommandSyntax(f"unexpected {word!r}")
            if low == "or":
                disjuncts.append([])
            expect_term = True
            i += 1
        else:
            if not expect_term:
                raise CommandSyntax(f"expected and/or before {word!r}")
            if i + 2 < len(rest) and rest[i + 1].upper() in ("CONTAINS", *_OPS):
                atom = Atom(word, rest[i + 1].upper(), rest[i + 2])
                i += 3
            else:
                m = _COND.fullmatch(word)
                if not m:
                    raise CommandSyntax(f"bad condition {word!r}")
                atom = Atom(m.group(1), m.group(2), m.group(3))
                i += 1
            disjuncts[-1].append(atom)
            expect_term = False
    if expect_term and (len(disjuncts) > 1 or disjuncts[0]):
        raise CommandSyntax("dangling and/or")
    predicate = disjunction(*(conjunction(*d) for d in disjuncts if d))
    if not select:
        if table not in SCHEMA:
            raise CommandSyntax(f"unknown table {table!r}")
        select = SCHEMA[table].column_names
    return QueryDoc(scope, select, table, predicate, tuple(joins))


@dataclass(frozen=True)
class Command:
    line: int
    text: str
    name: str
    args: tuple[str, ...]
    query: QueryDoc | None = None


_ARITY = {
    "login": (1, 2), "import": (1, 2), "mirror": (2, 2), "get": (1, 2), "cat": (1, 1),
    "submit": (2, None), "jobs": (0, 0), "audit": (0, 0), "topology": (0, 0), "quit": (0, 0),
}


def parse_command(text: str, line: int = 0) -> Command | None:
    """Validate one console line; blank lines and ``#`` comments give None."""
    stripped = text.strip()
    if not stripped or stripped.startswith("#"):
        return None
    try:
        words = shlex.split(stripped)
    except ValueError as exc:
        raise CommandSyntax(str(exc)) from None
    name, args = words[0].lower(), tuple(words[1:])
    if name not in COMMANDS:
        raise CommandSyntax(f"unknown command {words[0]!r}")
    if name == "query":
        return Command(line, stripped, name, args, parse_query_args(list(args)))
    if name == "expect":
        if not args:
            raise CommandSyntax("expect needs: rows N | ok | error CODE | contains TEXT")
        what = args[0]
        if what == "rows" and len(args) == 2 and args[1].isdigit():
            pass
        elif what == "ok" and len(args) == 1:
            pass
        elif what in ("error", "contains") and len(args) >= 2:
            pass
        else:
            raise CommandSyntax(f"bad expectation {' '.join(args)!r}")
        return Command(line, stripped, name, args)
    lo, hi = _ARITY[name]
    if len(args) < lo or (hi is not None and len(args) > hi):
        raise CommandSyntax(f"{name}: wrong number of arguments")
    if name == "submit" and args[0] not in KINDS:
        raise CommandSyntax(f"job kind must be one of {', '.join(KINDS)}")
    return Command(line, stripped, name, args)


@dataclass
class ScenarioScript:
    commands: list[Command] = field(default_factory=list)
    base_dir: Path | None = None

    @classmethod
    def parse(cls, text: str, base_dir=None) -> "ScenarioScript":
        """Validate every line up front; a syntax error names its line."""
        commands = []
        for n, raw in enumerate(text.splitlines(), 1):
            try:
                cmd = parse_command(raw, n)
            except HospigridError as exc:
                raise CommandSyntax(f"line {n}: {exc}") from None
            if cmd is not None:
                commands.append(cmd)
        return cls(commands, Path(base_dir) if base_dir else None)


# ---------------------------------------------------------------- execution


@dataclass
class Outcome:
    text: str = ""
    rows: int | None = None
    error: str | None = None


def _table(header, rows) -> str:
    lines = ["\t".join(header)] + ["\t".join(str(v) for v in r) for r in rows]
    return "".join(line + "\n" for line in lines)


def _seconds(x: Fraction) -> str:
    return f"{float(x):.6f}"


class Console:
    """Command interpreter bound to one grid and an acting site."""

    RECEIPT_HEADER = ("lfn", "from", "to", "bytes", "seconds", "mode")

    def __init__(self, grid: Grid, site: str | None = None, policy=None, base_dir=None):
        self.grid = grid
        self.site = site or next(iter(grid.nodes))
        self.session = None
        self.policy = policy or RandomPolicy(0)
        self.base_dir = Path(base_dir) if base_dir else None
        self.last: Outcome | None = None

    @property
    def prompt(self) -> str:
        who = f"{self.session.user}@" if self.session else ""
        return f"{who}{self.site}> "

    def _session(self):
        if self.session is None:
            raise NoSession("no session; use: login <user>")
        return self.session

    def execute(self, cmd: Command) -> Outcome:
        try:
            out = getattr(self, f"do_{cmd.name}")(cmd)
        except HospigridError as exc:
            out = Outcome(f"ERROR {exc.code} {exc}\n", error=exc.code)
        self.last = out
        return out

    def do_login(self, cmd):
        user = cmd.args[0]
        site = cmd.args[1] if len(cmd.args) > 1 else self.site
        if site not in self.grid.nodes:
            raise SiteUnavailable(f"{site} is not hosted by this console")
        self.session = self.grid.open_session(user, site)
        self.site = site
        return Outcome(_table(("user", "site", "rights"),
                              [(user, site, ",".join(sorted(self.session.rights)))]), rows=1)

    def _read_input(self, path: str) -> bytes:
        if path.startswith("synth:"):
            try:
                return parse_synth_spec(path)
            except ValueError as exc:
                raise CommandSyntax(str(exc)) from None
        p = Path(path)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        try:
            return p.read_bytes()
        except OSError as exc:
            raise CommandSyntax(f"cannot read {path}: {exc.strerror}") from None

    def do_import(self, cmd):
        data = self._read_input(cmd.args[0])
        r = self.grid.import_file(self._session(), data, cmd.args[1] if len(cmd.args) > 1 else None)
        return Outcome(_table(("lfn", "guid", "pseudonym", "bytes"),
                              [(r.lfn, r.guid, r.pseudonym, r.size_bytes)]), rows=1)

    def do_query(self, cmd):
        outcome = self.grid.query(self._session(), cmd.query)
        rs = outcome.result
        text = _table(rs.columns, rs.rows)
        down = ",".join(m.site for m in outcome.unavailable) or "-"
        sites = ",".join(rs.contributing_sites or [rs.origin_site]) or "-"
        text += f"# rows={len(rs.rows)} dedup={rs.dedup_count} sites={sites} unavailable={down}\n"
        return Outcome(text, rows=len(rs.rows))

    def _receipt(self, r) -> Outcome:
        return Outcome(_table(self.RECEIPT_HEADER,
                              [(r.lfn, r.src, r.dst, r.bytes, _seconds(r.duration), r.mode)]), rows=1)

    def do_mirror(self, cmd):
        return self._receipt(self.grid.mirror(cmd.args[0], cmd.args[1], self._session()))

    def do_get(self, cmd):
        data, receipt = self.grid.get(cmd.args[0], self.site, self._session())
        if len(cmd.args) > 1:
            out = Path(cmd.args[1])
            if not out.is_absolute() and self.base_dir is not None:
                out = self.base_dir / out
            out.write_bytes(data)
        return self._receipt(receipt)

    def do_cat(self, cmd):
        text = self.grid.cat(cmd.args[0], self.site, self._session())
        return Outcome(text, rows=text.count("\n"))

    def do_submit(self, cmd):
        o = self.grid.submit(self._session(), cmd.args[0], cmd.args[1:], self.policy)
        p, r = o.placement, o.result
        return Outcome(_table(
            ("job_id", "policy", "site", "wan_bytes", "status", "output_lfn", "digest"),
            [(p.job_id, p.policy, p.chosen_site, p.wan_bytes_incurred, r.status,
              r.output_lfn or "-", r.digest or r.reason)]), rows=1)

    def do_jobs(self, cmd):
        jobs = self.grid.jobs
        text = _table(("job_id", "policy", "site", "wan_bytes", "status", "output_lfn"),
                      [(o.placement.job_id, o.placement.policy, o.placement.chosen_site,
                        o.placement.wan_bytes_incurred, o.result.status, o.result.output_lfn or "-")
                       for o in jobs])
        text += "\n" + report_tsv(workload_report(o.placement for o in jobs))
        return Outcome(text, rows=len(jobs))

    def do_audit(self, cmd):
        rows = self.grid.audit.snapshot().rows()
        text = _table(("from", "to", "class", "messages", "bytes"), rows)
        text += f"# clock={_seconds(self.grid.clock.now)}\n"
        return Outcome(text, rows=len(rows))

    def do_topology(self, cmd):
        text = self.grid.topology.dump()
        return Outcome(text, rows=text.count("\n"))

    def do_quit(self, cmd):
        return Outcome()

    def check(self, cmd: Command) -> None:
        """Evaluate an ``expect`` line against the previous outcome."""
        last = self.last or Outcome()
        what = cmd.args[0]
        if what == "ok":
            if last.error:
                raise AssertionFailed(cmd.line, f"expected success, got {last.error}")
        elif what == "error":
            if last.error != cmd.args[1]:
                raise AssertionFailed(cmd.line, f"expected error {cmd.args[1]}, got {last.error or 'success'}")
        elif what == "rows":
            if last.rows != int(cmd.args[1]):
                raise AssertionFailed(cmd.line, f"expected {cmd.args[1]} rows, got {last.rows}")
        elif what == "contains":
            needle = " ".join(cmd.args[1:])
            if needle not in last.text:
                raise AssertionFailed(cmd.line, f"output does not contain {needle!r}")


def run_script(console: Console, script: ScenarioScript, out=None) -> int:
    """Run every command, echoing it and its output. Returns the exit status:
    0 on success (or ``quit``), 1 on the first failed assertion."""
    out = out or sys.stdout
    for cmd in script.commands:
        out.write(f"> {cmd.text}\n")
        if cmd.name == "expect":
            try:
                console.check(cmd)
            except AssertionFailed as exc:
                out.write(f"ASSERTION FAILED {exc}\n")
                return 1
            continue
        out.write(console.execute(cmd).text)
        if cmd.name == "quit":
            break
    return 0


def repl(console: Console, stdin=None, out=None) -> int:
    stdin, out = stdin or sys.stdin, out or sys.stdout
    interactive = stdin.isatty()
    while True:
        if interactive:
            out.write(console.prompt)
            out.flush()
        raw = stdin.readline()
        if not raw:
            return 0
        try:
            cmd = parse_command(raw)
        except HospigridError as exc:
            out.write(f"ERROR {exc.code} {exc}\n")
            continue
        if cmd is None:
            continue
        if cmd.name == "expect":
            try:
                console.check(cmd)
            except AssertionFailed as exc:
                out.write(f"ASSERTION FAILED {exc}\n")
            continue
        out.write(console.execute(cmd).text)
        if cmd.name == "quit":
            return 0


# ---------------------------------------------------------------- entry point


def _bundled(name: str) -> str:
    return resources.files("hospigrid").joinpath("scenarios", name).read_text(encoding="utf-8")


def read_topology(ref: str) -> Topology:
    """A path, or ``@name`` for a bundled topology (``@p1``, ``@p1_5``, ``@p2``)."""
    if ref.startswith("@"):
        return parse_topology(_bundled(f"{ref[1:]}.topology"))
    return load_topology(ref)


def read_script(ref: str) -> ScenarioScript:
    """A path, or ``@name`` for a bundled script (``@deployment``)."""
    if ref.startswith("@"):
        return ScenarioScript.parse(_bundled(f"{ref[1:]}.script"))
    path = Path(ref)
    return ScenarioScript.parse(path.read_text(encoding="utf-8"), base_dir=path.parent)


def parse_policy_arg(text: str, seed: int):
    if text == "random":
        return RandomPolicy(seed)
    if text == "datalocal":
        return DataLocalPolicy()
    raise argparse.ArgumentTypeError(f"unknown policy {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hospigrid", description="Hospital imaging grid console.")
    p.add_argument("--topology", default=DEFAULT_TOPOLOGY,
                   help="topology file, or @p1 / @p1_5 / @p2 for a bundled one (default @p1_5)")
    p.add_argument("--site", help="acting site; with the socket backend, the only site hosted here")
    p.add_argument("--backend", choices=("inproc", "socket"), default="inproc")
    p.add_argument("--seed", type=int, default=0, help="seed of the random placement policy")
    p.add_argument("--policy", choices=("random", "datalocal"), default="random")
    p.add_argument("--script", help="run a scenario script (path or @deployment) and exit")
    p.add_argument("--data-dir", default=os.environ.get("HOSPIGRID_DATA_DIR"),
                   help="persist catalogs and storage here (default: $HOSPIGRID_DATA_DIR, else memory)")
    p.add_argument("--serve", action="store_true", help="host the site(s) without a console until interrupted")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        topology = read_topology(args.topology)
        script = read_script(args.script) if args.script else None
    except (HospigridError, OSError) as exc:
        code = getattr(exc, "code", "E_CONFIG")
        print(f"ERROR {code} {exc}", file=sys.stderr)
        return 2
    if args.site and args.site not in topology:
        print(f"ERROR E_CONFIG unknown site {args.site}", file=sys.stderr)
        return 2
    if not 0 <= args.seed < 2**64:
        print("ERROR E_CONFIG seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    hosted = [args.site] if args.backend == "socket" and args.site else None
    with Grid(topology, backend=args.backend, data_dir=args.data_dir, hosted=hosted) as grid:
        console = Console(grid, args.site, parse_policy_arg(args.policy, args.seed),
                          script.base_dir if script else None)
        if script is not None:
            return run_script(console, script)
        if args.serve:
            print(f"serving {','.join(grid.nodes)}", flush=True)
            try:
                threading.Event().wait()
            except KeyboardInterrupt:
                return 0
        return repl(console)


if __name__ == "__main__":
    sys.exit(main())
