"""Per-site catalogs: the grid database (LFN -> GUID -> replicas), the local
medical database, the metadata database (schema descriptor) and the storage
element holding physical replicas.

Each catalog serializes its own operations behind a lock and can persist to
an append-only log that is replayed on startup.
"""

from __future__ import annotations

import hashlib
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from .errors import (
    AlreadyReplicated,
    DuplicateImageId,
    DuplicateLfn,
    InvalidLfn,
    SchemaMismatch,
    StorageFull,
    UnknownLfn,
)
from .model import DicomLiteFile, ImageRecord, PatientRecord, content_guid, serialize_dicom_lite
from .textio import join_fields, split_fields

# ---------------------------------------------------------------- names


def validate_lfn(path: str) -> str:
    if not isinstance(path, str) or not path.startswith("/"):
        raise InvalidLfn(f"LFN must be absolute: {path!r}")
    if path == "/" or "" in path[1:].split("/"):
        raise InvalidLfn(f"LFN has empty segments: {path!r}")
    if any(c in path for c in "\t\n\r "):
        raise InvalidLfn(f"LFN contains whitespace: {path!r}")
    return path


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class ReplicaEntry:
    guid: str
    site: str
    physical_path: str
    size_bytes: int
    content_hash: str

    def fields(self) -> tuple:
        return (self.guid, self.site, self.physical_path, self.size_bytes, self.content_hash)

    @classmethod
    def from_fields(cls, fields) -> "ReplicaEntry":
        guid, site, path, size, digest = fields
        return cls(guid, site, path, int(size), digest)


def physical_path_for(site: str, guid: str) -> str:
    return f"/se/{site}/{guid}"


# ---------------------------------------------------------------- log


class AppendOnlyLog:
    """One record per line: ``<op> <tab-separated fields>\\n``."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, op: str, *fields) -> None:
        line = f"{op} {join_fields(fields)}\n"
        with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(line)
            fh.flush()

    def replay(self) -> Iterator[tuple[str, list[str]]]:
        if not self.path.exists():
            return
        with open(self.path, encoding="utf-8", newline="\n") as fh:
            for line in fh:
                if not line.endswith("\n"):
                    break  # torn final write
                op, _, rest = line[:-1].partition(" ")
                yield op, split_fields(rest)


# ---------------------------------------------------------------- grid_db


class GridCatalog:
    """The grid database: LFN namespace mapped to a GUID and its replicas."""

    role = "grid_db"

    def __init__(self, site: str, log_path: str | os.PathLike | None = None):
        self.site = site
        self._entries: dict[str, tuple[str, list[ReplicaEntry]]] = {}
        self._lock = threading.RLock()
        self.writes = 0
        self._log = AppendOnlyLog(log_path) if log_path else None
        if self._log:
            self._replay()

    def _replay(self) -> None:
        for op, fields in self._log.replay():
            if op == "REG":
                self._register(fields[0], ReplicaEntry.from_fields(fields[1:]))
            elif op == "REPL":
                self._add_replica(fields[0], ReplicaEntry.from_fields(fields[1:]))
            elif op == "DEL":
                self._entries.pop(fields[0], None)
        self.writes = 0

    def _register(self, lfn: str, replica: ReplicaEntry) -> None:
        self._entries[lfn] = (replica.guid, [replica])

    def _add_replica(self, lfn: str, replica: ReplicaEntry) -> None:
        self._entries[lfn][1].append(replica)

    def register(self, lfn: str, replica: ReplicaEntry) -> str:
        validate_lfn(lfn)
        with self._lock:
            if lfn in self._entries:
                raise DuplicateLfn(lfn)
            self._register(lfn, replica)
            self.writes += 1
            if self._log:
                self._log.append("REG", lfn, *replica.fields())
        return replica.guid

    def add_replica(self, lfn: str, replica: ReplicaEntry) -> None:
        with self._lock:
            guid, replicas = self.lookup(lfn)
            if replica.guid != guid or replica.content_hash != replicas[0].content_hash:
                raise ValueError(f"replica of {lfn} does not match registered content")
            if any(r.site == replica.site for r in replicas):
                raise AlreadyReplicated(replica.site)
            self._add_replica(lfn, replica)
            self.writes += 1
            if self._log:
                self._log.append("REPL", lfn, *replica.fields())

    def unregister(self, lfn: str) -> None:
        with self._lock:
            if lfn not in self._entries:
                raise UnknownLfn(lfn)
            del self._entries[lfn]
            self.writes += 1
            if self._log:
                self._log.append("DEL", lfn)

    def lookup(self, lfn: str) -> tuple[str, list[ReplicaEntry]]:
        with self._lock:
            try:
                guid, replicas = self._entries[lfn]
            except KeyError:
                raise UnknownLfn(lfn) from None
            return guid, list(replicas)

    def __contains__(self, lfn: str) -> bool:
        return lfn in self._entries

    def list_namespace(self, prefix: str = "/") -> list[str]:
        if not prefix.startswith("/"):
            raise InvalidLfn(f"prefix must begin with '/': {prefix!r}")
        with self._lock:
            hits = [lfn for lfn in self._entries if lfn.startswith(prefix)]
        return sorted(hits, key=lambda s: s.encode("utf-8"))

    def snapshot(self) -> dict:
        with self._lock:
            return {lfn: (guid, tuple(reps)) for lfn, (guid, reps) in sorted(self._entries.items())}


# ---------------------------------------------------------------- schema / metadata_db


@dataclass(frozen=True)
class Column:
    name: str
    type: str  # TEXT | INTEGER | DATE


@dataclass(frozen=True)
class TableSchema:
    name: str
    primary_key: str
    columns: tuple[Column, ...]

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    def column(self, name: str) -> Column | None:
        for c in self.columns:
            if c.name == name:
                return c
        return None


def _table(name, pk, *cols) -> TableSchema:
    return TableSchema(name, pk, tuple(Column(*c) for c in cols))


SCHEMA: dict[str, TableSchema] = {
    t.name: t
    for t in (
        _table(
            "patients", "pseudonym",
            ("pseudonym", "TEXT"), ("age", "INTEGER"), ("site_of_origin", "TEXT"),
        ),
        _table(
            "studies", "study_id",
            ("study_id", "TEXT"), ("patient_pseudonym", "TEXT"), ("study_date", "DATE"),
            ("site_of_origin", "TEXT"),
        ),
        _table(
            "images", "image_id",
            ("image_id", "TEXT"), ("patient_pseudonym", "TEXT"), ("study_id", "TEXT"),
            ("study_date", "DATE"), ("modality", "TEXT"), ("laterality", "TEXT"),
            ("view", "TEXT"), ("density", "INTEGER"), ("lfn", "TEXT"), ("guid", "TEXT"),
            ("site_of_origin", "TEXT"),
        ),
    )
}


class MetadataDatabase:
    """Static description of the local database's data model."""

    role = "metadata_db"

    def __init__(self, schema: dict[str, TableSchema] = SCHEMA):
        self.schema = dict(schema)

    def rows(self) -> list[tuple[str, str, str, bool]]:
        return [
            (t.name, c.name, c.type, c.name == t.primary_key)
            for t in self.schema.values()
            for c in t.columns
        ]

    def table(self, name: str) -> TableSchema | None:
        return self.schema.get(name)


def coerce(value, column: Column):
    """Convert a raw value to the column's storage type."""
    if column.type == "INTEGER":
        if isinstance(value, bool):
            raise SchemaMismatch(f"{column.name}: boolean not allowed")
        if isinstance(value, int):
            return value
        text = str(value).strip()
        try:
            return int(text)
        except ValueError:
            raise SchemaMismatch(f"{column.name}: {value!r} is not an integer") from None
    if column.type == "DATE" and not isinstance(value, str):
        return value.isoformat()
    return str(value)


# ---------------------------------------------------------------- local_db


class LocalDatabase:
    """The local medical database: patients, studies and images of one site.

    Rows are keyed by (primary key, site_of_origin) so that the central node
    of a centralized deployment can hold every site's rows side by side.
    """

    role = "local_db"

    def __init__(self, site: str, schema: dict[str, TableSchema] = SCHEMA,
                 log_path: str | os.PathLike | None = None):
        self.site = site
        self.schema = schema
        self._tables: dict[str, dict[tuple, dict]] = {name: {} for name in schema}
        self.sealed: dict[tuple[str, str], bytes] = {}
        self._lock = threading.RLock()
        self._log = AppendOnlyLog(log_path) if log_path else None
        if self._log:
            for op, fields in self._log.replay():
                if op == "INS":
                    table = fields[0]
                    self._insert(table, dict(zip(schema[table].column_names, fields[1:])))
                elif op == "SEAL":
                    self.sealed[(fields[0], fields[1])] = bytes.fromhex(fields[2])

    def _normalize(self, table: str, row: dict) -> dict:
        ts = self.schema.get(table)
        if ts is None:
            raise SchemaMismatch(f"unknown table {table}")
        extra = set(row) - set(ts.column_names)
        if extra:
            raise SchemaMismatch(f"{table}: unknown columns {sorted(extra)}")
        return {c.name: coerce(row.get(c.name, 0 if c.type == "INTEGER" else ""), c) for c in ts.columns}

    def _key(self, table: str, row: dict) -> tuple:
        return (row[self.schema[table].primary_key], row.get("site_of_origin", ""))

    def _insert(self, table: str, row: dict) -> bool:
        row = self._normalize(table, row)
        key = self._key(table, row)
        existing = self._tables[table].get(key)
        if existing is not None:
            if existing == row:
                return False
            if table == "images":
                raise DuplicateImageId(f"{key[0]} at {key[1]}")
            return False
        self._tables[table][key] = row
        return True

    def insert(self, table: str, row: dict) -> bool:
        """Insert a row; identical re-inserts are no-ops.

        A conflicting image row raises DuplicateImageId; conflicting patient
        or study rows keep the first version.
        """
        with self._lock:
            row = self._normalize(table, row)
            inserted = self._insert(table, row)
            if inserted and self._log:
                self._log.append("INS", table, *(row[c] for c in self.schema[table].column_names))
            return inserted

    def has_image(self, image_id: str, site: str) -> bool:
        return (image_id, site) in self._tables["images"]

    def add_image(self, image: ImageRecord, patient: PatientRecord) -> None:
        with self._lock:
            if self.has_image(image.image_id, image.site_of_origin):
                raise DuplicateImageId(f"{image.image_id} at {image.site_of_origin}")
            self.insert("patients", patient_row(patient))
            self.insert("studies", study_row(image))
            self.insert("images", image_row(image))
            key = (patient.pseudonym, patient.site_of_origin)
            if key not in self.sealed:
                self.sealed[key] = patient.personal_fields_sealed
                if self._log:
                    self._log.append("SEAL", *key, patient.personal_fields_sealed.hex())

    def rows(self, table: str, origin: str | None = None) -> list[dict]:
        """Rows of ``table`` in ascending primary-key order."""
        with self._lock:
            items = sorted(self._tables[table].items(), key=lambda kv: kv[0])
        return [dict(r) for k, r in items if origin is None or k[1] == origin]

    def origins(self) -> list[str]:
        with self._lock:
            return sorted({k[1] for t in self._tables.values() for k in t})

    def view(self, origin: str) -> "DatabaseView":
        return DatabaseView(self, origin)

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "tables": {t: sorted(tuple(sorted(r.items())) for r in rows.values())
                           for t, rows in self._tables.items()},
                "sealed": dict(sorted(self.sealed.items())),
            }


class DatabaseView:
    """Read-only slice of a LocalDatabase restricted to one origin site."""

    def __init__(self, db: LocalDatabase, origin: str):
        self.db, self.origin, self.schema = db, origin, db.schema

    def rows(self, table: str) -> list[dict]:
        return self.db.rows(table, origin=self.origin)


def patient_row(p: PatientRecord) -> dict:
    return {"pseudonym": p.pseudonym, "age": p.age, "site_of_origin": p.site_of_origin}


def study_row(img: ImageRecord) -> dict:
    return {
        "study_id": img.study_id,
        "patient_pseudonym": img.patient_pseudonym,
        "study_date": img.study_date.isoformat(),
        "site_of_origin": img.site_of_origin,
    }


def image_row(img: ImageRecord) -> dict:
    return {
        "image_id": img.image_id,
        "patient_pseudonym": img.patient_pseudonym,
        "study_id": img.study_id,
        "study_date": img.study_date.isoformat(),
        "modality": img.modality,
        "laterality": img.laterality,
        "view": img.view,
        "density": img.density,
        "lfn": img.lfn,
        "guid": img.guid,
        "site_of_origin": img.site_of_origin,
    }


# ---------------------------------------------------------------- storage element


class StorageElement:
    def __init__(self, site: str, capacity: int | None = None, root: str | os.PathLike | None = None):
        self.site = site
        self.capacity = capacity
        self._files: dict[str, bytes] = {}
        self._lock = threading.RLock()
        self.root = Path(root) if root else None
        if self.root:
            self.root.mkdir(parents=True, exist_ok=True)
            for f in sorted(self.root.iterdir()):
                if f.is_file() and not f.name.endswith(".tmp"):
                    self._files[self._path_of(f.name)] = f.read_bytes()

    @staticmethod
    def _name_of(path: str) -> str:
        return path.strip("/").replace("/", "__")

    @staticmethod
    def _path_of(name: str) -> str:
        return "/" + name.replace("__", "/")

    @property
    def used(self) -> int:
        return sum(len(b) for b in self._files.values())

    def can_store(self, path: str, size: int) -> bool:
        if self.capacity is None or path in self._files:
            return True
        return self.used + size <= self.capacity

    def put(self, path: str, data: bytes) -> None:
        with self._lock:
            if path in self._files:
                return
            if not self.can_store(path, len(data)):
                raise StorageFull(f"{self.site}: {len(data)} bytes exceed capacity {self.capacity}")
            self._files[path] = bytes(data)
            if self.root:
                target = self.root / self._name_of(path)
                tmp = target.with_name(target.name + ".tmp")
                tmp.write_bytes(data)
                os.replace(tmp, target)

    def read(self, path: str) -> bytes:
        with self._lock:
            try:
                return self._files[path]
            except KeyError:
                raise UnknownLfn(f"no physical file {path} at {self.site}") from None

    def has(self, path: str) -> bool:
        return path in self._files

    def snapshot(self) -> dict:
        with self._lock:
            return {p: content_hash(b) for p, b in sorted(self._files.items())}


# ---------------------------------------------------------------- operations


def register_file(catalog: GridCatalog, storage: StorageElement, lfn: str,
                  file: DicomLiteFile | bytes, site: str) -> str:
    """Store ``file`` in the site's storage element and register it."""
    validate_lfn(lfn)
    data = serialize_dicom_lite(file) if isinstance(file, DicomLiteFile) else bytes(file)
    replica = make_replica(data, site)
    with catalog._lock:
        if lfn in catalog:
            raise DuplicateLfn(lfn)
        storage.put(replica.physical_path, data)
        catalog.register(lfn, replica)
    return replica.guid


def make_replica(data: bytes, site: str, guid: str | None = None) -> ReplicaEntry:
    guid = guid or content_guid(data)
    return ReplicaEntry(guid, site, physical_path_for(site, guid), len(data), content_hash(data))


def catalog_location(topology, caller: str) -> str:
    """Site whose grid database serves ``caller``.

    Centralized deployments route every catalog read and write to the central
    node; federated ones keep the catalog on the caller's own site.
    """
    if topology.mode == "P1":
        return topology.central
    return caller
