"""Medical-domain types: the DICOM-lite container, pseudonymization and
metadata extraction.

Container layout (byte exact)::

    DCML1\\n
    <tag>=<value>\\n        (zero or more, UTF-8)
    PIXELS <len>\\n
    <len raw bytes>

The sealing scheme used by :func:`pseudonymize` is a keyed-hash XOR stream
with an HMAC tag. It is deterministic and dependency free, and it is NOT
cryptographically strong; treat it as a placeholder for a real cipher.
"""

from __future__ import annotations

import hashlib
import hmac
import re
from dataclasses import dataclass, field
from datetime import date

from .errors import (
    InvalidTagValue,
    MalformedContainer,
    MissingRequiredTag,
    SealError,
)

MAGIC = b"DCML1\n"
REQUIRED_TAGS = ("PatientName", "PatientID", "StudyDate", "Modality", "ImageID")
PERSONAL_TAGS = ("PatientName", "PatientID")

_PIXELS_LINE = re.compile(rb"PIXELS (0|[1-9][0-9]*)")


@dataclass(frozen=True)
class SiteId:
    name: str
    address: str = ""

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class DicomLiteFile:
    tags: tuple[tuple[str, str], ...]
    pixel_data: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "tags", tuple((str(k), str(v)) for k, v in self.tags))
        object.__setattr__(self, "pixel_data", bytes(self.pixel_data))
        seen = set()
        for name, value in self.tags:
            if not name or "=" in name or "\n" in name:
                raise InvalidTagValue(f"illegal tag name {name!r}")
            if "\n" in value:
                raise InvalidTagValue(f"newline in value of {name}")
            if name in seen:
                raise InvalidTagValue(f"duplicate tag {name}")
            seen.add(name)
        for name in REQUIRED_TAGS:
            if name not in seen:
                raise MissingRequiredTag(name)

    @property
    def size_bytes(self) -> int:
        n = len(MAGIC) + len(self.pixel_data)
        n += sum(len(k.encode()) + len(v.encode()) + 2 for k, v in self.tags)
        return n + len(f"PIXELS {len(self.pixel_data)}\n")

    def get(self, name: str, default: str | None = None) -> str | None:
        for k, v in self.tags:
            if k == name:
                return v
        return default

    def __getitem__(self, name: str) -> str:
        value = self.get(name)
        if value is None:
            raise KeyError(name)
        return value

    def with_tags(self, **updates: str) -> "DicomLiteFile":
        """Return a copy with tags replaced in place or appended at the end."""
        tags = []
        for k, v in self.tags:
            tags.append((k, updates.pop(k) if k in updates else v))
        tags.extend(updates.items())
        return DicomLiteFile(tuple(tags), self.pixel_data)

    def header_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.tags)


def serialize_dicom_lite(file: DicomLiteFile) -> bytes:
    head = MAGIC + file.header_text().encode("utf-8")
    return head + f"PIXELS {len(file.pixel_data)}\n".encode("ascii") + file.pixel_data


def parse_dicom_lite(data: bytes) -> DicomLiteFile:
    data = bytes(data)
    if not data.startswith(MAGIC):
        raise MalformedContainer(0, "bad magic")
    pos = len(MAGIC)
    tags: list[tuple[str, str]] = []
    names: set[str] = set()
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise MalformedContainer(pos, "unterminated header line")
        line = data[pos:nl]
        m = _PIXELS_LINE.fullmatch(line)
        if m:
            length = int(m.group(1))
            start = nl + 1
            if len(data) - start != length:
                raise MalformedContainer(start, f"expected {length} pixel bytes, found {len(data) - start}")
            pixels = data[start:]
            break
        eq = line.find(b"=")
        if eq <= 0:
            raise MalformedContainer(pos, "expected tag=value")
        try:
            name = line[:eq].decode("utf-8")
            value = line[eq + 1:].decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedContainer(pos, "invalid UTF-8") from None
        if name in names:
            raise MalformedContainer(pos, f"duplicate tag {name}")
        names.add(name)
        tags.append((name, value))
        pos = nl + 1
    for name in REQUIRED_TAGS:
        if name not in names:
            raise MissingRequiredTag(name)
    return DicomLiteFile(tuple(tags), pixels)


@dataclass(frozen=True)
class PatientRecord:
    pseudonym: str
    personal_fields_sealed: bytes = field(repr=False)
    site_of_origin: str
    age: int = 0


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    patient_pseudonym: str
    study_date: date
    modality: str
    lfn: str
    site_of_origin: str
    guid: str = ""
    study_id: str = ""
    laterality: str = ""
    view: str = ""
    density: int = 0


def _mac(key: bytes, *parts: bytes) -> bytes:
    return hmac.new(key, b"\x00".join(parts), hashlib.sha256).digest()


def make_pseudonym(patient_id: str, site: str, site_key: bytes, avoid: tuple[str, ...] = ()) -> str:
    """First 16 hex chars of HMAC-SHA256 over (site, patient id).

    A counter is mixed in on the (rare) occasion that the hex string happens
    to contain one of the ``avoid`` values, so the pseudonym can never echo a
    personal field.
    """
    counter = 0
    while True:
        parts = [site.encode(), patient_id.encode()]
        if counter:
            parts.append(str(counter).encode())
        candidate = _mac(site_key, *parts).hex()[:16]
        if not any(len(a) >= 3 and a in candidate for a in avoid):
            return candidate
        counter += 1


def _keystream(key: bytes, nonce: bytes, n: int) -> bytes:
    out = bytearray()
    block = 0
    while len(out) < n:
        out += _mac(key, b"seal", nonce, block.to_bytes(8, "big"))
        block += 1
    return bytes(out[:n])


def seal(values: tuple[str, ...], site_key: bytes, nonce: bytes) -> bytes:
    plain = "\x1f".join(values).encode("utf-8")
    nonce = nonce[:16].ljust(16, b"\x00")
    ct = bytes(a ^ b for a, b in zip(plain, _keystream(site_key, nonce, len(plain))))
    return nonce + ct + _mac(site_key, b"tag", nonce, ct)[:16]


def unseal(sealed: bytes, site_key: bytes) -> tuple[str, ...]:
    if len(sealed) < 32:
        raise SealError("sealed blob too short")
    nonce, ct, tag = sealed[:16], sealed[16:-16], sealed[-16:]
    if not hmac.compare_digest(tag, _mac(site_key, b"tag", nonce, ct)[:16]):
        raise SealError("wrong key or corrupted blob")
    plain = bytes(a ^ b for a, b in zip(ct, _keystream(site_key, nonce, len(ct))))
    return tuple(plain.decode("utf-8").split("\x1f"))


def pseudonymize(file: DicomLiteFile, site_key: bytes, site: str = "") -> tuple[DicomLiteFile, PatientRecord]:
    """Replace the patient's name and ID with a site-keyed pseudonym.

    Occurrences of either value inside other tag values are scrubbed too.
    Pixel data is left untouched.
    """
    if not site_key:
        raise ValueError("site_key must be non-empty")
    name, pid = file["PatientName"], file["PatientID"]
    personal = tuple(v for v in (name, pid) if v)
    pseudonym = make_pseudonym(pid, site, site_key, avoid=personal)

    tags = []
    for k, v in file.tags:
        if k in PERSONAL_TAGS:
            v = pseudonym
        else:
            for secret in sorted(personal, key=len, reverse=True):
                if len(secret) >= 3:
                    v = v.replace(secret, pseudonym)
        tags.append((k, v))
    if "PatientIdentityRemoved" not in {k for k, _ in tags}:
        tags.append(("PatientIdentityRemoved", "YES"))
    out = DicomLiteFile(tuple(tags), file.pixel_data)

    nonce = _mac(site_key, b"nonce", site.encode(), pid.encode())[:16]
    record = PatientRecord(
        pseudonym=pseudonym,
        personal_fields_sealed=seal((name, pid), site_key, nonce),
        site_of_origin=site,
        age=_int_tag(file, "PatientAge"),
    )
    return out, record


def _int_tag(file: DicomLiteFile, name: str) -> int:
    raw = file.get(name, "") or ""
    digits = raw.rstrip("Y")  # DICOM ages look like "052Y"
    if not digits:
        return 0
    try:
        return int(digits)
    except ValueError:
        raise InvalidTagValue(f"{name}={raw!r} is not an integer") from None


def content_guid(data: bytes) -> str:
    """128-bit identifier: the content digest truncated to 32 hex chars."""
    return hashlib.sha256(data).hexdigest()[:32]


def extract_metadata(file: DicomLiteFile, lfn: str, site: str) -> ImageRecord:
    for name in REQUIRED_TAGS:
        if not file.get(name):
            raise MissingRequiredTag(name)
    try:
        study_date = date.fromisoformat(file["StudyDate"])
    except ValueError:
        raise InvalidTagValue(f"StudyDate={file['StudyDate']!r} is not an ISO date") from None
    pseudonym = file["PatientID"]
    return ImageRecord(
        image_id=file["ImageID"],
        patient_pseudonym=pseudonym,
        study_date=study_date,
        modality=file["Modality"],
        lfn=lfn,
        site_of_origin=site,
        guid=content_guid(serialize_dicom_lite(file)),
        study_id=file.get("StudyID") or f"{pseudonym}-{study_date.isoformat()}",
        laterality=file.get("Laterality", ""),
        view=file.get("ViewPosition", ""),
        density=_int_tag(file, "BreastDensity"),
    )
