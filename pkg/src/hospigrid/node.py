"""A hospital grid box: one site's catalogs, storage, query manager and job
executor, plus the handlers that answer other sites' messages.

Work that touches another site always goes through the transport, so the
same code runs over the in-process bus and over sockets.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

from . import gridio
from .catalog import (
    GridCatalog,
    LocalDatabase,
    MetadataDatabase,
    ReplicaEntry,
    StorageElement,
    catalog_location,
    content_hash,
    make_replica,
    physical_path_for,
    validate_lfn,
)
from .errors import (
    AlreadyReplicated,
    DuplicateImageId,
    DuplicateLfn,
    HospigridError,
    NotAllowlisted,
    NotAuthorized,
    SiteUnavailable,
    StorageFull,
    UnknownLfn,
)
from .federation import Decision, GasFactory, authorize
from .gridio import TransferReceipt, parse_receipt_fields
from .jobs import STUB_ERRORS, JobResult, JobSpec, Placement, Scheduler, digest, output_lfn, run_stub
from .model import (
    ImageRecord,
    PatientRecord,
    extract_metadata,
    parse_dicom_lite,
    pseudonymize,
    serialize_dicom_lite,
)
from .query import (
    QueryDoc,
    ResultSet,
    SiteUnavailableMarker,
    distribute_global,
    execute_local,
    merge_results,
    parse_query,
    parse_result_doc,
    serialize_query,
    split_parts,
    translate_query,
    translate_results,
)
from .textio import join_fields, split_fields

log = logging.getLogger(__name__)


def default_lfn(site: str, image_id: str) -> str:
    return f"/mammogrid/{site}/{image_id}.dcml"


def _records(payload: bytes) -> list[list[str]]:
    text = payload.decode("utf-8")
    return [split_fields(line) for line in text.split("\n") if line]


def _encode(*records) -> bytes:
    return "".join(join_fields(r) + "\n" for r in records).encode("utf-8")


def _image_from_row(row: dict) -> ImageRecord:
    return ImageRecord(
        image_id=row["image_id"],
        patient_pseudonym=row["patient_pseudonym"],
        study_date=date.fromisoformat(row["study_date"]),
        modality=row["modality"],
        lfn=row["lfn"],
        site_of_origin=row["site_of_origin"],
        guid=row["guid"],
        study_id=row["study_id"],
        laterality=row["laterality"],
        view=row["view"],
        density=int(row["density"]),
    )


@dataclass(frozen=True)
class ImportResult:
    lfn: str
    guid: str
    image_id: str
    pseudonym: str
    size_bytes: int


@dataclass
class QueryOutcome:
    result: ResultSet
    parts: list = field(default_factory=list)

    @property
    def unavailable(self) -> list[SiteUnavailableMarker]:
        return [p for p in self.parts if isinstance(p, SiteUnavailableMarker)]


@dataclass(frozen=True)
class JobOutcome:
    placement: Placement
    result: JobResult


class GridNode:
    def __init__(self, grid, site: str, data_dir=None, capacity: int | None = None):
        self.grid = grid
        self.site = site
        self.topology = grid.topology
        self.transport = grid.transport
        self.clock = grid.clock
        root = Path(data_dir) / site if data_dir else None
        self.grid_db = GridCatalog(site, root / "grid_db.log" if root else None)
        self.local_db = LocalDatabase(site, log_path=root / "local_db.log" if root else None)
        self.metadata_db = MetadataDatabase()
        self.storage = StorageElement(site, capacity, root / "se" if root else None)
        self.gas = GasFactory(site, self.topology, self.clock)
        self.scheduler = Scheduler()
        self.site_key = self.topology.site_key(site)
        self.receipts: list[TransferReceipt] = []
        self.jobs: list[JobOutcome] = []
        self.executed: list[JobResult] = []
        self._ingest_lock = threading.RLock()

    def __repr__(self) -> str:
        return f"GridNode({self.site})"

    # -- helpers
    @property
    def catalog_site(self) -> str:
        return catalog_location(self.topology, self.site)

    @property
    def is_central(self) -> bool:
        return self.topology.mode == "P1" and self.site == self.topology.central

    def call(self, dst: str, cls: str, kind: str, payload: bytes = b""):
        return self.transport.call(self.site, dst, cls, kind, payload)

    def authorize(self, session, op: str, target: str) -> Decision:
        return authorize(session, op, target, self.topology)

    def require(self, session, op: str, target: str) -> None:
        decision = self.authorize(session, op, target)
        if not decision.allowed:
            raise NotAuthorized(decision.reason, f"{op} on {target} for {session.user}@{session.home_site}")

    def record_receipt(self, receipt: TransferReceipt) -> None:
        self.receipts.append(receipt)
        self.grid.receipts.append(receipt)

    # -- ingest
    def import_file(self, data: bytes, lfn: str | None, session) -> ImportResult:
        """Pseudonymize a DICOM-lite file, store it here and register it."""
        self.require(session, "replicate", self.site)
        original = parse_dicom_lite(data)
        clean, patient = pseudonymize(original, self.site_key, self.site)
        lfn = validate_lfn(lfn or default_lfn(self.site, clean["ImageID"]))
        record = extract_metadata(clean, lfn, self.site)
        blob = serialize_dicom_lite(clean)
        replica = make_replica(blob, self.site)
        with self._ingest_lock:
            if not self.storage.can_store(replica.physical_path, len(blob)):
                raise StorageFull(f"{self.site}: no room for {len(blob)} bytes")
            if self.catalog_site == self.site:
                self._check_new(lfn, record)
                self.storage.put(replica.physical_path, blob)
                self._register(lfn, replica, record, patient)
            else:
                self.call(self.catalog_site, "control", "INGEST", _encode(
                    ["REG", lfn, *replica.fields()],
                    ["IMG", *(self._image_row(record))],
                    ["PAT", patient.pseudonym, patient.age, patient.site_of_origin,
                     patient.personal_fields_sealed.hex()],
                ))
                self.storage.put(replica.physical_path, blob)
        return ImportResult(lfn, replica.guid, record.image_id, patient.pseudonym, len(blob))

    @staticmethod
    def _image_row(record: ImageRecord) -> list:
        from .catalog import image_row

        return list(image_row(record).values())

    def _check_new(self, lfn: str, record: ImageRecord | None) -> None:
        if lfn in self.grid_db:
            raise DuplicateLfn(lfn)
        if record is not None and self.local_db.has_image(record.image_id, record.site_of_origin):
            raise DuplicateImageId(f"{record.image_id} at {record.site_of_origin}")

    def _register(self, lfn, replica, record, patient) -> None:
        self.grid_db.register(lfn, replica)
        if record is not None:
            self.local_db.add_image(record, patient)

    def register_output(self, lfn: str, data: bytes, cat_site: str | None = None) -> ReplicaEntry:
        """Store a job output here and register it (no medical metadata) in
        ``cat_site``'s catalog, by default this site's catalog location.

        Outputs are deterministic, so re-running a job yields the same guid;
        that case adds a replica instead of failing as a duplicate.
        """
        replica = make_replica(data, self.site)
        cat_site = cat_site or self.catalog_site
        with self._ingest_lock:
            try:
                if cat_site == self.site:
                    guid, replicas = self.grid_db.lookup(lfn)
                else:
                    guid, replicas = self._remote_lookup(cat_site, lfn)
            except UnknownLfn:
                guid, replicas = None, []
            if guid is not None:
                if guid != replica.guid:
                    raise DuplicateLfn(lfn)
                if any(r.site == self.site for r in replicas):
                    return replica
            if not self.storage.can_store(replica.physical_path, len(data)):
                raise StorageFull(f"{self.site}: no room for {len(data)} bytes")
            if cat_site == self.site:
                self.storage.put(replica.physical_path, data)
                if guid is None:
                    self.grid_db.register(lfn, replica)
                else:
                    self.grid_db.add_replica(lfn, replica)
            else:
                self.call(cat_site, "control", "REPL" if guid else "REGFILE", _encode([lfn, *replica.fields()]))
                self.storage.put(replica.physical_path, data)
        return replica

    # -- catalog resolution
    def _lookup_order(self, lfn: str) -> list[str]:
        peers = [s for s in self.topology.scope_sites(self.site) if s != self.site]
        parts = lfn.split("/")
        hint = parts[2] if len(parts) > 2 else None
        if hint in peers:
            peers.remove(hint)
            peers.insert(0, hint)
        return peers

    def _remote_lookup(self, site: str, lfn: str):
        resp = self.call(site, "control", "LOOKUP", lfn.encode("utf-8"))
        recs = _records(resp.payload)
        return recs[0][0], [ReplicaEntry.from_fields(r) for r in recs[1:]]

    def locate(self, lfn: str) -> tuple[str, str, list[ReplicaEntry]]:
        """(catalog site holding the entry, guid, replicas)."""
        loc = self.catalog_site
        if loc != self.site:
            return (loc, *self._remote_lookup(loc, lfn))
        try:
            return (self.site, *self.grid_db.lookup(lfn))
        except UnknownLfn:
            if self.topology.mode == "P1":
                raise
        unreachable = None
        for peer in self._lookup_order(lfn):
            try:
                return (peer, *self._remote_lookup(peer, lfn))
            except UnknownLfn:
                continue
            except (SiteUnavailable, NotAllowlisted) as exc:
                unreachable = exc
        if unreachable is not None:
            raise SiteUnavailable(f"{lfn} not found on reachable sites") from unreachable
        raise UnknownLfn(lfn)

    def resolve(self, lfn: str) -> tuple[str, list[ReplicaEntry]]:
        _, guid, replicas = self.locate(lfn)
        return guid, replicas

    # -- file movement
    def fetch(self, lfn: str, replica: ReplicaEntry) -> tuple[bytes, TransferReceipt]:
        if replica.site == self.site:
            data = self.storage.read(replica.physical_path)
            now = self.clock.now
            return data, TransferReceipt(lfn, self.site, self.site, len(data), now, now, "direct")
        resp = self.call(replica.site, "control", "FETCH", replica.physical_path.encode("utf-8"))
        data = resp.payload
        if content_hash(data) != replica.content_hash:
            raise HospigridError(f"content of {lfn} from {replica.site} does not match its catalog hash")
        return data, TransferReceipt(lfn, replica.site, self.site, len(data), resp.sent_at, resp.delivered_at, "grid")

    def replicate_to(self, lfn: str, target: str) -> TransferReceipt:
        if target not in self.topology:
            raise SiteUnavailable(f"unknown site {target}")
        if target == self.site:
            return self.pull(lfn)
        resp = self.call(target, "control", "MIRROR", lfn.encode("utf-8"))
        return parse_receipt_fields(_records(resp.payload)[0])

    def pull(self, lfn: str) -> TransferReceipt:
        """Create a replica of ``lfn`` on this site from its first replica."""
        cat_site, guid, replicas = self.locate(lfn)
        if any(r.site == self.site for r in replicas):
            raise AlreadyReplicated(self.site)
        source = replicas[0]
        path = physical_path_for(self.site, guid)
        if not self.storage.can_store(path, source.size_bytes):
            raise StorageFull(f"{self.site}: no room for {source.size_bytes} bytes")
        data, receipt = self.fetch(lfn, source)
        self.storage.put(path, data)
        replica = ReplicaEntry(guid, self.site, path, len(data), source.content_hash)
        if cat_site == self.site:
            self.grid_db.add_replica(lfn, replica)
        else:
            self.call(cat_site, "control", "REPL", _encode([lfn, *replica.fields()]))
        self.record_receipt(receipt)
        return receipt

    def retrieve(self, lfn: str) -> tuple[str, bytes]:
        """Read ``lfn`` on behalf of a job from a local replica or the
        nearest remote one; returns (catalog site of the entry, bytes)."""
        cat_site, guid, replicas = self.locate(lfn)
        for r in replicas:
            if r.site == self.site:
                return cat_site, self.storage.read(r.physical_path)
        ranked = sorted(replicas, key=lambda r: (
            gridio.transfer_time(r.size_bytes, self.topology.link(r.site, self.site), "grid"), r.site.encode()))
        last = None
        for r in ranked:
            try:
                data, receipt = self.fetch(lfn, r)
            except (SiteUnavailable, NotAllowlisted) as exc:
                last = exc
                continue
            self.record_receipt(receipt)
            return cat_site, data
        raise SiteUnavailable(f"no reachable replica of {lfn}") from last

    # -- queries
    def answer(self, doc: QueryDoc, requester: str) -> ResultSet:
        """What this site's query manager returns for ``doc``."""
        plan = translate_query(doc, self.metadata_db.schema)
        if self.is_central:
            if doc.scope == "Local":
                return execute_local(plan, self.local_db.view(requester), self.site)
            held = set(self.local_db.origins())
            origins = [s for s in self.topology.site_names if s in held]
            origins += sorted(held - set(origins))
            parts = [execute_local(plan, self.local_db.view(o), o) for o in origins]
            return merge_results(parts, columns=doc.select, origin_site=self.site)
        return execute_local(plan, self.local_db, self.site)

    def remote_query(self, site: str, doc: QueryDoc) -> ResultSet:
        resp = self.call(site, "query", "QUERY", serialize_query(doc).encode("utf-8"))
        return parse_result_doc(resp.payload.decode("utf-8"), origin_site=site)

    def query(self, doc: QueryDoc, session) -> QueryOutcome:
        op = "query_local" if doc.scope == "Local" else "query_global"
        self.require(session, op, self.site)
        translate_query(doc, self.metadata_db.schema)
        if doc.scope == "Local":
            if self.catalog_site != self.site:
                rs = self.remote_query(self.catalog_site, doc)
            else:
                rs = self.answer(doc, self.site)
            return QueryOutcome(rs, [rs])
        parts = distribute_global(
            doc, self.site, self.topology,
            run_local=lambda d: self.answer(d, self.site),
            run_remote=self.remote_query,
        )
        ok, _ = split_parts(parts)
        merged = merge_results(ok, columns=doc.select, origin_site=self.site)
        return QueryOutcome(merged, parts)

    # -- jobs
    def live_sites(self) -> list[str]:
        return [s for s in self.topology.scope_sites(self.site) if self.grid.is_up(s)]

    def submit(self, kind: str, input_lfns, session, policy, job_id: str | None = None) -> JobOutcome:
        self.require(session, "execute", self.site)
        spec = JobSpec(job_id or f"{self.site}-{self.scheduler.ordinal + 1:04d}", kind,
                       tuple(input_lfns), session, self.site)
        inputs = {lfn: self.resolve(lfn) for lfn in spec.input_lfns}

        def admit(p: Placement) -> None:
            self.require(session, "execute", p.chosen_site)

        placement = self.scheduler.schedule(spec, policy, self.live_sites(), inputs, admit)
        if placement.chosen_site == self.site:
            result = self.run_job(spec)
        else:
            resp = self.call(placement.chosen_site, "job", "JOB", spec.line().encode("utf-8"))
            f = _records(resp.payload)[0]
            result = JobResult(f[0], f[1], f[2], f[3], f[4], f[5])
        outcome = JobOutcome(placement, result)
        self.jobs.append(outcome)
        self.grid.jobs.append(outcome)
        return outcome

    def run_job(self, spec: JobSpec) -> JobResult:
        fetched = [self.retrieve(lfn) for lfn in spec.input_lfns]
        try:
            out = run_stub(spec.kind, fetched[0][1])
        except STUB_ERRORS as exc:
            result = JobResult(spec.job_id, "Failed", reason=str(exc), site=self.site)
        else:
            lfn = output_lfn(spec)
            # the output lives in the catalog that owns its (first) input
            self.register_output(lfn, out, fetched[0][0])
            result = JobResult(spec.job_id, "Done", lfn, digest(out), site=self.site)
        self.executed.append(result)
        return result

    # -- message handling
    def handle(self, env):
        kind = env.kind
        if kind == "ECHO":
            return ("control", "ECHO", env.payload)
        if kind == "QUERY":
            doc = parse_query(env.payload.decode("utf-8"))
            rs = self.answer(doc, env.src)
            return ("result", "RES", translate_results(rs).text.encode("utf-8"))
        if kind == "LOOKUP":
            guid, replicas = self.grid_db.lookup(env.payload.decode("utf-8"))
            return ("control", "ENTRY", _encode([guid], *(r.fields() for r in replicas)))
        if kind == "FETCH":
            return ("transfer", "DATA", self.storage.read(env.payload.decode("utf-8")))
        if kind == "MIRROR":
            receipt = self.pull(env.payload.decode("utf-8"))
            return ("control", "RECEIPT", _encode(receipt.fields()))
        if kind == "REPL":
            f = _records(env.payload)[0]
            self.grid_db.add_replica(f[0], ReplicaEntry.from_fields(f[1:]))
            return ("control", "OK", b"")
        if kind == "INGEST":
            return self._handle_ingest(env)
        if kind == "REGFILE":
            f = _records(env.payload)[0]
            with self._ingest_lock:
                self._check_new(f[0], None)
                self.grid_db.register(f[0], ReplicaEntry.from_fields(f[1:]))
            return ("control", "OK", b"")
        if kind == "JOB":
            parts = env.payload.decode("utf-8").split()
            spec = JobSpec(parts[1], parts[2], tuple(parts[3:]), None, env.src)
            r = self.run_job(spec)
            return ("control", "RESULT", _encode([r.job_id, r.status, r.output_lfn, r.digest, r.reason, r.site]))
        raise HospigridError(f"unknown message kind {kind}")

    def _handle_ingest(self, env):
        recs = {r[0]: r[1:] for r in _records(env.payload)}
        lfn, replica = recs["REG"][0], ReplicaEntry.from_fields(recs["REG"][1:])
        from .catalog import SCHEMA

        record = _image_from_row(dict(zip(SCHEMA["images"].column_names, recs["IMG"])))
        pseudonym, age, origin, sealed = recs["PAT"]
        patient = PatientRecord(pseudonym, bytes.fromhex(sealed), origin, int(age))
        with self._ingest_lock:
            self._check_new(lfn, record)
            self._register(lfn, replica, record, patient)
        return ("control", "OK", b"")

    # -- inspection
    def snapshot(self) -> dict:
        return {
            "grid_db": self.grid_db.snapshot(),
            "local_db": self.local_db.snapshot(),
            "storage": self.storage.snapshot(),
            "jobs": [(o.placement, o.result) for o in self.jobs],
            "executed": list(self.executed),
            "scheduler": self.scheduler.ordinal,
        }
