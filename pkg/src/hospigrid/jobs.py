"""Job placement and the deterministic SMF / CADe stand-in executors.

Two placement policies are provided: seeded random placement (SplitMix64
over the seed and the job's ordinal) and data-local placement (the live
site already holding the most input bytes).
"""

from __future__ import annotations

import hashlib
import threading
from collections import OrderedDict
from dataclasses import dataclass

from .errors import MalformedConfig, MalformedContainer, MissingRequiredTag, NoLiveSites
from .model import parse_dicom_lite, serialize_dicom_lite

KINDS = ("SMF", "CADe")
MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(seed: int, ordinal: int) -> int:
    """The (ordinal+1)-th output of a SplitMix64 stream seeded with ``seed``."""
    z = (seed + (ordinal + 1) * GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class RandomPolicy:
    seed: int

    @property
    def name(self) -> str:
        return f"Random({self.seed})"


@dataclass(frozen=True)
class DataLocalPolicy:
    name: str = "DataLocal"


def parse_policy(text: str):
    low = text.lower()
    if low in ("datalocal", "data-local", "local"):
        return DataLocalPolicy()
    if low.startswith("random"):
        inner = text[len("random"):].strip("():= ")
        return RandomPolicy(int(inner) if inner else 0)
    raise ValueError(f"unknown placement policy {text!r}")


@dataclass(frozen=True)
class JobSpec:
    job_id: str
    kind: str
    input_lfns: tuple[str, ...]
    submitted_by: object = None
    origin: str = ""

    def __post_init__(self):
        object.__setattr__(self, "input_lfns", tuple(self.input_lfns))
        if self.kind not in KINDS:
            raise ValueError(f"job kind must be SMF or CADe, not {self.kind!r}")
        if not self.input_lfns:
            raise ValueError("a job needs at least one input")

    def line(self) -> str:
        return f"JOB {self.job_id} {self.kind} {' '.join(self.input_lfns)}"


@dataclass(frozen=True)
class Placement:
    job_id: str
    chosen_site: str
    policy: str
    wan_bytes_incurred: int


@dataclass(frozen=True)
class JobResult:
    job_id: str
    status: str  # Done | Failed
    output_lfn: str = ""
    digest: str = ""
    reason: str = ""
    site: str = ""


def place(spec: JobSpec, policy, ordinal: int, live_sites, inputs) -> Placement:
    """Choose a site for ``spec``.

    ``inputs`` maps each input LFN to ``(guid, replicas)`` as returned by a
    catalog lookup; ``live_sites`` is in topology order.
    """
    live = list(live_sites)
    if not live:
        raise NoLiveSites(spec.job_id)

    def local_bytes(site: str) -> int:
        return sum(reps[0].size_bytes for _, reps in inputs.values() if any(r.site == site for r in reps))

    if isinstance(policy, RandomPolicy):
        chosen = live[splitmix64(policy.seed, ordinal) % len(live)]
    elif isinstance(policy, DataLocalPolicy):
        chosen = min(live, key=lambda s: (-local_bytes(s), s.encode()))
    else:
        raise TypeError(f"unsupported policy {policy!r}")
    total = sum(reps[0].size_bytes for _, reps in inputs.values())
    return Placement(spec.job_id, chosen, policy.name, total - local_bytes(chosen))


class Scheduler:
    """Hands out job ordinals; one serialization domain per submitting site."""

    def __init__(self):
        self._lock = threading.Lock()
        self.ordinal = 0
        self.placements: list[Placement] = []

    def schedule(self, spec: JobSpec, policy, live_sites, inputs, admit=None) -> Placement:
        with self._lock:
            placement = place(spec, policy, self.ordinal, live_sites, inputs)
            if admit is not None:
                admit(placement)
            self.ordinal += 1
            self.placements.append(placement)
            return placement


# ---------------------------------------------------------------- stub executors

_INVERT = bytes(255 - i for i in range(256))


def invert_pixels(pixels: bytes) -> bytes:
    """Fixed byte-wise involution applied by the SMF stand-in."""
    return pixels.translate(_INVERT)


def smf_stub(data: bytes) -> bytes:
    f = parse_dicom_lite(data)
    out = f.with_tags(SMF="done")
    return serialize_dicom_lite(type(f)(out.tags, invert_pixels(f.pixel_data)))


def cade_findings(pixels: bytes) -> list[tuple[int, int, float]]:
    count = len(pixels) % 4
    found = []
    for i in range(count):
        h = hashlib.sha256(pixels + i.to_bytes(4, "big")).digest()
        x = int.from_bytes(h[0:2], "big") % 4096
        y = int.from_bytes(h[2:4], "big") % 4096
        score = int.from_bytes(h[4:6], "big") / 65535
        found.append((x, y, round(score, 4)))
    return found


def cade_stub(data: bytes) -> bytes:
    f = parse_dicom_lite(data)
    findings = cade_findings(f.pixel_data)
    lines = [
        "CADe report",
        f"image {f['ImageID']}",
        f"pixels {len(f.pixel_data)}",
        f"findings {len(findings)}",
    ]
    lines += [f"finding {i + 1} x={x} y={y} score={s:.4f}" for i, (x, y, s) in enumerate(findings)]
    return "".join(line + "\n" for line in lines).encode("utf-8")


def run_stub(kind: str, data: bytes) -> bytes:
    if kind == "SMF":
        return smf_stub(data)
    if kind == "CADe":
        return cade_stub(data)
    raise ValueError(kind)


def output_lfn(spec: JobSpec) -> str:
    return f"{spec.input_lfns[0]}.{spec.kind}.out"


STUB_ERRORS = (MalformedContainer, MissingRequiredTag)


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------- files and reports


def parse_job_file(text: str) -> list[tuple[str, str, tuple[str, ...]]]:
    jobs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] != "JOB" or len(parts) < 4 or parts[2] not in KINDS:
            raise MalformedConfig(f"line {lineno}: bad job line {line!r}")
        jobs.append((parts[1], parts[2], tuple(parts[3:])))
    return jobs


def workload_report(placements) -> "OrderedDict[str, tuple[int, int]]":
    """policy -> (total WAN bytes incurred, job count), in first-seen order."""
    out: OrderedDict[str, list[int]] = OrderedDict()
    for p in placements:
        acc = out.setdefault(p.policy, [0, 0])
        acc[0] += p.wan_bytes_incurred
        acc[1] += 1
    return OrderedDict((k, (v[0], v[1])) for k, v in out.items())


def report_tsv(report) -> str:
    lines = ["policy\ttotal_wan_bytes\tjob_count"]
    lines += [f"{policy}\t{total}\t{count}" for policy, (total, count) in report.items()]
    return "".join(line + "\n" for line in lines)
