"""Fan-out of global queries (the Query Distributor)."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

from ..errors import NotAllowlisted, SiteUnavailable
from .doc import QueryDoc
from .results import ResultSet


@dataclass(frozen=True)
class SiteUnavailableMarker:
    site: str
    reason: str = "SiteUnavailable"


def global_targets(topology, origin: str) -> list[str]:
    if topology.mode == "P1":
        return [topology.central]
    return topology.scope_sites(origin)


def distribute_global(
    doc: QueryDoc,
    origin: str,
    topology,
    run_local: Callable[[QueryDoc], ResultSet],
    run_remote: Callable[[str, QueryDoc], ResultSet],
    max_workers: int = 1,
) -> list[ResultSet | SiteUnavailableMarker]:
    """One result (or unavailability marker) per target site, in topology
    order. Centralized deployments have the central node as the only target.
    """
    if doc.scope != "Global":
        raise ValueError("distribute_global needs a Global-scope document")
    targets = global_targets(topology, origin)

    def one(site: str):
        try:
            return run_local(doc) if site == origin else run_remote(site, doc)
        except (SiteUnavailable, NotAllowlisted) as exc:
            return SiteUnavailableMarker(site, type(exc).__name__)

    if max_workers > 1 and len(targets) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(one, targets))
    return [one(s) for s in targets]


def split_parts(parts) -> tuple[list[ResultSet], list[SiteUnavailableMarker]]:
    ok = [p for p in parts if isinstance(p, ResultSet)]
    down = [p for p in parts if isinstance(p, SiteUnavailableMarker)]
    return ok, down


__all__ = ["SiteUnavailableMarker", "distribute_global", "global_targets", "split_parts"]
