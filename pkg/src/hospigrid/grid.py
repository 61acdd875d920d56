"""The desk-scale federation: every hosted site's node wired to one
transport, virtual clock and WAN audit."""

from __future__ import annotations

from pathlib import Path

from . import gridio
from .federation import Topology, WanAudit, load_topology
from .node import GridNode, ImportResult, JobOutcome, QueryOutcome
from .transport import SimClock, make_transport


class Grid:
    """Hosts the nodes of ``topology`` (all sites unless ``hosted`` names a
    subset, e.g. one site per process in a socket deployment)."""

    def __init__(self, topology: Topology | str | Path, backend: str = "inproc", data_dir=None,
                 capture_payloads: bool = False, capacity: int | None = None, hosted=None):
        if not isinstance(topology, Topology):
            topology = load_topology(topology)
        self.topology = topology
        self.backend = backend
        self.clock = SimClock()
        self.audit = WanAudit(capture=capture_payloads)
        self.transport = make_transport(backend, topology, self.clock, self.audit)
        self.receipts: list[gridio.TransferReceipt] = []
        self.jobs: list[JobOutcome] = []
        names = list(hosted) if hosted else list(topology.site_names)
        caps = capacity if isinstance(capacity, dict) else {s: capacity for s in names}
        self.nodes: dict[str, GridNode] = {}
        try:
            for s in names:
                node = GridNode(self, s, data_dir, caps.get(s))
                self.nodes[s] = node
                self.transport.bind(s, node.handle)
        except Exception:
            self.transport.close()
            raise

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        self.transport.close()

    def node(self, site: str) -> GridNode:
        return self.nodes[site]

    def is_up(self, site: str) -> bool:
        return self.transport.is_up(site)

    def stop_site(self, site: str) -> None:
        self.transport.stop_site(site)

    def start_site(self, site: str) -> None:
        self.transport.start_site(site)

    # -- client operations, executed at the session's (or given) site
    def open_session(self, user: str, site: str, rights=None, cert=None):
        return self.node(site).gas.open(user, rights, cert)

    def import_file(self, session, data: bytes, lfn: str | None = None) -> ImportResult:
        return self.node(session.home_site).import_file(data, lfn, session)

    def query(self, session, doc) -> QueryOutcome:
        return self.node(session.home_site).query(doc, session)

    def mirror(self, lfn: str, target: str, session):
        return gridio.mirror(self.node(session.home_site), lfn, target, session)

    def get(self, lfn: str, dest: str, session):
        return gridio.get(self.node(dest), lfn, session)

    def cat(self, lfn: str, viewer: str, session) -> str:
        return gridio.cat(self.node(viewer), lfn, session)

    def submit(self, session, kind: str, input_lfns, policy, job_id=None) -> JobOutcome:
        return self.node(session.home_site).submit(kind, input_lfns, session, policy, job_id)

    def lookup(self, lfn: str, site: str):
        return self.node(site).resolve(lfn)

    def snapshot(self) -> dict:
        return {s: n.snapshot() for s, n in sorted(self.nodes.items())}
