from __future__ import annotations

import io
import subprocess
import sys

import pytest
from support import topology_text

from hospigrid import Grid, parse_topology
from hospigrid.cli import (
    AssertionFailed,
    Console,
    ScenarioScript,
    main,
    parse_command,
    parse_query_args,
    read_script,
    read_topology,
    repl,
    run_script,
)
from hospigrid.errors import CommandSyntax
from hospigrid.query import And, Atom, Join, Or

SETUP = """\
login alice
import synth:1:16
import synth:2:16
import synth:3:16
"""


@pytest.fixture
def console(make_grid):
    grid = make_grid(topology_text("P1_5", ("a", "b", "c"), extra="USER a bob read,query_local\n"))
    return Console(grid, "a")


def run(console, text: str) -> tuple[int, str]:
    out = io.StringIO()
    status = run_script(console, ScenarioScript.parse(text), out)
    return status, out.getvalue()


# ---------------------------------------------------------------- grammar


def test_query_args_simple():
    doc = parse_query_args(["local", "images", "modality=MG", "select", "image_id,lfn"])
    assert doc.scope == "Local" and doc.table == "images"
    assert doc.predicate == Atom("modality", "=", "MG")
    assert doc.select == ("image_id", "lfn")


def test_query_args_and_binds_tighter_than_or():
    doc = parse_query_args(["global", "images", "modality=MG", "and", "density>=3", "or", "laterality=L"])
    assert doc.predicate == Or(And(Atom("modality", "=", "MG"), Atom("density", ">=", "3")),
                               Atom("laterality", "=", "L"))


def test_query_args_join_contains_and_default_select():
    doc = parse_query_args(["global", "images", "join", "patients", "on", "patient_pseudonym=pseudonym",
                            "lfn", "contains", "udine", "and", "patients.age>50"])
    assert doc.joins == (Join("patients", "patient_pseudonym", "pseudonym"),)
    assert doc.predicate == And(Atom("lfn", "CONTAINS", "udine"), Atom("patients.age", ">", "50"))
    assert "image_id" in doc.select and "guid" in doc.select


@pytest.mark.parametrize("args", [
    [], ["sideways", "images"], ["local", "images", "and"], ["local", "images", "a=1", "b=2"],
    ["local", "images", "a=1", "or"], ["local", "images", "join", "patients"], ["local", "nope"],
    ["local", "images", "select"], ["local", "images", "what?"],
])
def test_query_args_errors(args):
    with pytest.raises(CommandSyntax):
        parse_query_args(args)


@pytest.mark.parametrize("line", [
    "launch rockets", "mirror /m/x", "submit FFT /m/x", "jobs now", "expect rows many", "expect", "cat",
    'import "unterminated',
])
def test_command_syntax_errors(line):
    with pytest.raises(CommandSyntax):
        parse_command(line)


def test_blank_and_comment_lines():
    assert parse_command("   ") is None
    assert parse_command("# note") is None
    assert parse_command("mirror /m/x b").args == ("/m/x", "b")


def test_script_validated_before_running(console):
    text = SETUP + "query local images\nmirror onlyone\n"
    with pytest.raises(CommandSyntax) as exc:
        ScenarioScript.parse(text)
    assert "line 6" in str(exc.value)
    assert not console.grid.nodes["a"].grid_db.list_namespace("/")


# ---------------------------------------------------------------- running scripts


def test_empty_script(console):
    assert run(console, "") == (0, "")
    assert run(console, "# just a comment\n\n") == (0, "")


def test_wrong_row_count_fails_with_line_number(console):
    status, out = run(console, SETUP + "query local images\nexpect rows 99\nquery local images\n")
    assert status == 1
    assert out.rstrip().splitlines()[-1].startswith("ASSERTION FAILED line 6:")
    assert out.count("> query") == 1  # stopped at the failure
    with pytest.raises(AssertionFailed):
        console.check(parse_command("expect rows 99", 6))


def test_query_output_table(console):
    status, out = run(console, SETUP + "query local images modality=MG select image_id,modality\n")
    assert status == 0
    block = out.split("> query local images modality=MG select image_id,modality\n")[1]
    lines = block.splitlines()
    assert lines[0] == "image_id\tmodality"
    footer = lines[-1]
    assert footer.startswith(f"# rows={len(lines) - 2} dedup=0 sites=a unavailable=-")
    assert all(line.endswith("\tMG") for line in lines[1:-1])


def test_missing_right_prints_stable_code(console):
    status, out = run(console, SETUP + "login bob\nquery global images\nexpect error E_RIGHTS\n"
                                       "query local images\nexpect rows 3\n")
    assert status == 0
    assert "ERROR E_RIGHTS" in out


def test_commands_need_a_session(console):
    status, out = run(console, "query local images\nexpect error E_SESSION\n")
    assert status == 0 and "ERROR E_SESSION" in out


def test_full_command_set(console, tmp_path):
    lfn = "/mammogrid/a/IMG000001.dcml"
    script = SETUP + "\n".join([
        f"mirror {lfn} b", "expect rows 1",
        f"mirror {lfn} b", "expect error E_REPLICATED",
        f"get {lfn} {tmp_path / 'copy.dcml'}", "expect ok",
        f"cat {lfn}", "expect contains PIXELS 16",
        f"submit SMF {lfn}", "expect contains Done",
        f"submit CADe {lfn}",
        "jobs", "expect rows 2",
        "audit", "expect contains # clock=",
        "topology", "expect contains MODE P1_5",
        "quit", "query local images",
    ]) + "\n"
    status, out = run(console, script)
    assert status == 0, out
    assert (tmp_path / "copy.dcml").read_bytes().startswith(b"DCML1\n")
    assert out.rstrip().endswith("> quit")  # nothing runs after quit


def test_repl_reports_errors_and_continues(console):
    stdin = io.StringIO("nonsense\nlogin alice\nimport synth:4:8\nquery local images\nexpect rows 1\nquit\n")
    out = io.StringIO()
    assert repl(console, stdin, out) == 0
    text = out.getvalue()
    assert text.startswith("ERROR E_SYNTAX")
    assert "# rows=1" in text and "ASSERTION" not in text


# ---------------------------------------------------------------- entry point


def test_bundled_resources():
    for ref in ("@p1", "@p1_5", "@p2"):
        assert read_topology(ref).site_names
    assert read_topology("@p1").central == "cern"
    script = read_script("@deployment")
    assert sum(c.name == "import" for c in script.commands) >= 20


def test_main_runs_a_script_file(tmp_path, capsys):
    (tmp_path / "t.topology").write_text(topology_text("P1_5", ("a", "b")))
    (tmp_path / "s.script").write_text(SETUP + "query global images\nexpect rows 3\n")
    assert main(["--topology", str(tmp_path / "t.topology"), "--script", str(tmp_path / "s.script")]) == 0
    assert "# rows=3" in capsys.readouterr().out


def test_main_exit_codes(tmp_path, capsys):
    (tmp_path / "bad.script").write_text("frobnicate\n")
    assert main(["--script", str(tmp_path / "bad.script")]) == 2
    assert main(["--topology", str(tmp_path / "missing.topology")]) == 2
    assert main(["--site", "atlantis", "--script", "@deployment"]) == 2
    (tmp_path / "fail.script").write_text("login alice\nexpect rows 5\n")
    assert main(["--script", str(tmp_path / "fail.script")]) == 1
    capsys.readouterr()


def test_data_dir_persists_between_runs(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("HOSPIGRID_DATA_DIR", str(tmp_path / "data"))
    (tmp_path / "one.script").write_text("login alice\nimport synth:9:8\n")
    (tmp_path / "two.script").write_text("login alice\nquery local images\nexpect rows 1\n")
    from hospigrid.cli import build_parser

    assert build_parser().parse_args([]).data_dir == str(tmp_path / "data")
    assert main(["--script", str(tmp_path / "one.script")]) == 0
    assert main(["--script", str(tmp_path / "two.script")]) == 0
    capsys.readouterr()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hospigrid", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "--topology" in proc.stdout


def test_console_acts_for_one_site():
    grid = Grid(parse_topology(topology_text("P1_5", ("a", "b"))))
    with grid:
        c = Console(grid, "b")
        assert c.prompt == "b> "
        c.execute(parse_command("login alice"))
        assert c.prompt == "alice@b> "
