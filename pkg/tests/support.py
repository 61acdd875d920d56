"""Builders shared by the test modules."""

from __future__ import annotations

from hospigrid.catalog import SCHEMA
from hospigrid.synth import synth_site_files


def topology_text(mode="P1_5", sites=("a", "b", "c"), central=None, extra="", rights="all",
                  overhead="0.25", latency="0.01") -> str:
    lines = [f"MODE {mode}"] + [f"SITE {s} -" for s in sites]
    if central:
        lines.append(f"CENTRAL {central}")
    for i, s in enumerate(sites):
        for t in sites[i + 1:]:
            lines.append(f"LINK {s} {t} 11534336 {latency} {overhead}")
            lines.append(f"LINK {t} {s} 11534336 {latency} {overhead}")
    lines += [f"USER {s} alice {rights}" for s in sites]
    return "\n".join(lines) + "\n" + extra


def load_dataset(grid, seed: int, counts: dict[str, int], pixel_bytes: int = 32) -> dict[str, list[bytes]]:
    """Import ``counts[site]`` synthetic files at each site; returns the
    original (identifiable) containers per site."""
    files = {}
    for site, n in counts.items():
        session = grid.open_session("alice", site)
        files[site] = synth_site_files(seed, site, n, pixel_bytes)
        for data in files[site]:
            grid.import_file(session, data)
    return files


def all_rows(grid, sites=None) -> dict[str, list[dict]]:
    """Every metadata row held anywhere in the grid, by table."""
    out = {t: [] for t in SCHEMA}
    for name, node in grid.nodes.items():
        if sites is not None and name not in sites:
            continue
        for t in SCHEMA:
            out[t].extend(node.local_db.rows(t))
    return out
