"""File movement over the simulated WAN: the link model, transfer receipts
and the middleware's mirror / get / cat commands.

Simulated time is exact: links and clocks use :class:`fractions.Fraction`.
Sizes use binary units (1 MB = 1,048,576 bytes).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .catalog import content_hash
from .errors import MalformedConfig, MalformedContainer, MissingRequiredTag, NotAuthorized, SiteUnavailable
from .model import parse_dicom_lite

MB = 1_048_576
PAPER_FILE_SIZE = 8_912_896  # 8.5 MB
VPN_BANDWIDTH = 11 * MB  # 11 MB/s


def _fraction(value) -> Fraction:
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


@dataclass(frozen=True)
class LinkSpec:
    src: str
    dst: str
    bandwidth: Fraction  # bytes per simulated second
    latency: Fraction = Fraction(0)
    grid_overhead: Fraction = Fraction(0)

    def __post_init__(self):
        for name in ("bandwidth", "latency", "grid_overhead"):
            object.__setattr__(self, name, _fraction(getattr(self, name)))
        if self.bandwidth <= 0:
            raise MalformedConfig(f"link {self.src}->{self.dst}: bandwidth must be > 0")
        if self.latency < 0 or self.grid_overhead < 0:
            raise MalformedConfig(f"link {self.src}->{self.dst}: negative latency or overhead")

    def line(self) -> str:
        return f"LINK {self.src} {self.dst} {_num(self.bandwidth)} {_num(self.latency)} {_num(self.grid_overhead)}"


def _num(x: Fraction) -> str:
    if x.denominator == 1:
        return str(x.numerator)
    text = f"{float(x):.12g}"
    return text if Fraction(text) == x else str(x)


def parse_link_line(line: str) -> LinkSpec:
    parts = line.split()
    if len(parts) != 6 or parts[0] != "LINK":
        raise MalformedConfig(f"bad LINK line {line!r}")
    try:
        return LinkSpec(parts[1], parts[2], Fraction(parts[3]), Fraction(parts[4]), Fraction(parts[5]))
    except (ValueError, ZeroDivisionError):
        raise MalformedConfig(f"bad number in {line!r}") from None


def load_links(text: str) -> dict[tuple[str, str], LinkSpec]:
    links = {}
    for raw in text.splitlines():
        line = raw.strip()
        if line and not line.startswith("#"):
            link = parse_link_line(line)
            links[(link.src, link.dst)] = link
    return links


def transfer_time(nbytes: int, link: LinkSpec, mode: str = "direct") -> Fraction:
    """latency + bytes/bandwidth, plus the grid overhead for grid-mediated moves."""
    if nbytes < 0:
        raise ValueError("byte count must be non-negative")
    if mode not in ("grid", "direct"):
        raise ValueError(f"mode must be grid or direct, not {mode!r}")
    t = link.latency + Fraction(nbytes) / link.bandwidth
    return t + link.grid_overhead if mode == "grid" else t


@dataclass(frozen=True)
class TransferReceipt:
    lfn: str
    src: str
    dst: str
    bytes: int
    started: Fraction
    finished: Fraction
    mode: str

    @property
    def duration(self) -> Fraction:
        return self.finished - self.started

    def fields(self) -> tuple:
        return (self.lfn, self.src, self.dst, self.bytes, _num(self.started), _num(self.finished), self.mode)


RECEIPT_HEADER = ("lfn", "from", "to", "bytes", "started", "finished", "mode")


def receipts_tsv(receipts) -> str:
    lines = ["\t".join(RECEIPT_HEADER)]
    lines += ["\t".join(str(f) for f in r.fields()) for r in receipts]
    return "".join(line + "\n" for line in lines)


def parse_receipt_fields(fields) -> TransferReceipt:
    lfn, src, dst, nbytes, started, finished, mode = fields
    return TransferReceipt(lfn, src, dst, int(nbytes), Fraction(started), Fraction(finished), mode)


# ---------------------------------------------------------------- middleware commands


def mirror(node, lfn: str, target: str, session) -> TransferReceipt:
    """Replicate ``lfn`` to ``target``; the source is the first registered replica."""
    node.require(session, "replicate", target)
    return node.replicate_to(lfn, target)


def get(node, lfn: str, session) -> tuple[bytes, TransferReceipt]:
    """Fetch ``lfn`` to ``node``'s site from the nearest replica."""
    node.require(session, "read", node.site)
    guid, replicas = node.resolve(lfn)
    local = [r for r in replicas if r.site == node.site]
    if local:
        data = node.storage.read(local[0].physical_path)
        now = node.clock.now
        return data, TransferReceipt(lfn, node.site, node.site, len(data), now, now, "direct")
    allowed = [r for r in replicas if node.authorize(session, "read", r.site).allowed]
    if not allowed:
        denial = node.authorize(session, "read", replicas[0].site)
        raise NotAuthorized(denial.reason, f"no readable replica of {lfn}")
    ranked = sorted(
        allowed,
        key=lambda r: (transfer_time(r.size_bytes, node.topology.link(r.site, node.site), "grid"),
                       r.site.encode()),
    )
    last_error = None
    for replica in ranked:
        try:
            data, receipt = node.fetch(lfn, replica)
        except SiteUnavailable as exc:
            last_error = exc
            continue
        node.record_receipt(receipt)
        return data, receipt
    raise SiteUnavailable(f"every replica site of {lfn} is down") from last_error


def render_cat(data: bytes) -> str:
    """Tag lines plus a PIXELS summary; pixel bytes are never rendered."""
    try:
        f = parse_dicom_lite(data)
    except (MalformedContainer, MissingRequiredTag):
        return data.decode("utf-8", errors="replace")
    return f.header_text() + f"PIXELS {len(f.pixel_data)}\n"


def cat(node, lfn: str, session) -> str:
    data, _ = get(node, lfn, session)
    return render_cat(data)


def verify(data: bytes, replica) -> bool:
    return content_hash(data) == replica.content_hash
