from __future__ import annotations

import pytest

from oracles import ACCEPTANCE
from support import topology_text

from hospigrid import Grid, parse_topology


@pytest.fixture
def make_grid():
    grids = []

    def build(text=None, backend="inproc", **kwargs):
        g = Grid(parse_topology(text or topology_text()), backend=backend, **kwargs)
        grids.append(g)
        return g

    yield build
    for g in grids:
        g.close()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
