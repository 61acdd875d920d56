"""Deployment topologies, host certificates, GAS-style sessions,
authorization and WAN accounting."""

from __future__ import annotations

import hashlib
import hmac
import secrets
import threading
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .errors import CyclicVoHierarchy, MalformedConfig, MissingCentral, RevokedCertificate, UnknownUser
from .gridio import VPN_BANDWIDTH, LinkSpec, parse_link_line
from .model import SiteId

MODES = ("P1", "P1_5", "P2")
RIGHTS = frozenset({"read", "query_local", "query_global", "replicate", "execute", "admin"})
DEFAULT_P1_SITES = ("cern", "oxford", "cambridge", "udine")
DEFAULT_VO = "mammogrid"
DEFAULT_AUTHORITY = "hospigrid-ca"


# ---------------------------------------------------------------- certificates


@dataclass(frozen=True)
class HostCertificate:
    site: str
    serial: int
    issued_by: str = DEFAULT_AUTHORITY
    revoked: bool = False

    def line(self) -> str:
        return f"CERT {self.site} {self.serial} {self.issued_by} {'revoked' if self.revoked else 'active'}"


def parse_cert_line(line: str) -> HostCertificate:
    parts = line.split()
    if len(parts) != 5 or parts[0] != "CERT" or parts[4] not in ("active", "revoked"):
        raise MalformedConfig(f"bad CERT line {line!r}")
    try:
        serial = int(parts[2])
    except ValueError:
        raise MalformedConfig(f"bad serial in {line!r}") from None
    return HostCertificate(parts[1], serial, parts[3], parts[4] == "revoked")


class CertificateRegistry:
    """Host certificates by (site, serial); at most one active per site."""

    def __init__(self, certs=()):
        self._certs: dict[tuple[str, int], HostCertificate] = {}
        self._lock = threading.Lock()
        for c in certs:
            self.add(c)

    def add(self, cert: HostCertificate) -> None:
        with self._lock:
            if not cert.revoked:
                active = self._active(cert.site)
                if active is not None and active.serial != cert.serial:
                    raise MalformedConfig(f"{cert.site} already has active certificate {active.serial}")
            self._certs[(cert.site, cert.serial)] = cert

    def _active(self, site: str) -> HostCertificate | None:
        for c in self._certs.values():
            if c.site == site and not c.revoked:
                return c
        return None

    def active(self, site: str) -> HostCertificate | None:
        with self._lock:
            return self._active(site)

    def issue(self, site: str, authority: str = DEFAULT_AUTHORITY) -> HostCertificate:
        """Issue a fresh certificate, revoking the current one (re-issuance)."""
        with self._lock:
            old = self._active(site)
            if old is not None:
                self._certs[(site, old.serial)] = HostCertificate(site, old.serial, old.issued_by, True)
            serial = 1 + max((s for (st, s) in self._certs if st == site), default=0)
            cert = HostCertificate(site, serial, authority)
            self._certs[(site, serial)] = cert
            return cert

    def revoke(self, site: str, serial: int) -> None:
        with self._lock:
            c = self._certs[(site, serial)]
            self._certs[(site, serial)] = HostCertificate(c.site, c.serial, c.issued_by, True)

    def is_active(self, cert: HostCertificate) -> bool:
        current = self._certs.get((cert.site, cert.serial))
        return current is not None and not current.revoked and current.issued_by == cert.issued_by

    def __iter__(self):
        return iter(sorted(self._certs.values(), key=lambda c: (c.site, c.serial)))

    def dump(self, authority_key: bytes | None = None) -> str:
        body = "".join(c.line() + "\n" for c in self)
        if authority_key:
            body += f"SIG {hmac.new(authority_key, body.encode(), hashlib.sha256).hexdigest()}\n"
        return body

    @classmethod
    def load(cls, text: str, authority_key: bytes | None = None) -> "CertificateRegistry":
        lines = [ln for ln in text.splitlines(keepends=True) if ln.strip() and not ln.startswith("#")]
        sig = None
        if lines and lines[-1].startswith("SIG "):
            sig = lines.pop().split()[1]
        if authority_key is not None:
            body = "".join(lines)
            want = hmac.new(authority_key, body.encode(), hashlib.sha256).hexdigest()
            if sig is None or not hmac.compare_digest(sig, want):
                raise MalformedConfig("certificate registry signature does not verify")
        return cls(parse_cert_line(ln.strip()) for ln in lines)


# ---------------------------------------------------------------- topology


@dataclass(frozen=True)
class Vo:
    id: str
    sites: tuple[str, ...]
    parent: str | None = None


@dataclass
class Topology:
    mode: str
    sites: tuple[SiteId, ...]
    central: str | None = None
    vos: tuple[Vo, ...] = ()
    allow: dict[str, frozenset] = field(default_factory=dict)
    links: dict[tuple[str, str], LinkSpec] = field(default_factory=dict)
    users: dict[str, dict[str, frozenset]] = field(default_factory=dict)
    certificates: CertificateRegistry = field(default_factory=CertificateRegistry)
    keys: dict[str, bytes] = field(default_factory=dict)
    default_bandwidth: Fraction = Fraction(VPN_BANDWIDTH)
    default_latency: Fraction = Fraction(0)
    default_grid_overhead: Fraction = Fraction(0)

    def __post_init__(self):
        self.validate()

    # -- validation
    def validate(self) -> None:
        if self.mode not in MODES:
            raise MalformedConfig(f"unknown mode {self.mode!r}")
        names = self.site_names
        if not names:
            raise MalformedConfig("topology has no sites")
        if len(set(names)) != len(names):
            raise MalformedConfig("duplicate site names")
        if self.mode == "P1":
            if not self.central:
                raise MissingCentral("P1 topology needs a CENTRAL site")
            if self.central not in names:
                raise MalformedConfig(f"central {self.central} is not a declared site")
        if not self.vos:
            self.vos = (Vo(DEFAULT_VO, names),)
        elif self.mode != "P2" and len(self.vos) > 1:
            raise MalformedConfig("only P2 topologies may declare several VOs")
        ids = [v.id for v in self.vos]
        if len(set(ids)) != len(ids):
            raise MalformedConfig("duplicate VO ids")
        member = defaultdict(list)
        for v in self.vos:
            for s in v.sites:
                if s not in names:
                    raise MalformedConfig(f"VO {v.id} lists unknown site {s}")
                member[s].append(v.id)
            if v.parent is not None and v.parent not in ids:
                raise MalformedConfig(f"VO {v.id} has unknown parent {v.parent}")
        for s in names:
            if len(member[s]) != 1:
                raise MalformedConfig(f"site {s} belongs to {len(member[s])} VOs (need exactly one)")
        parents = {v.id: v.parent for v in self.vos}
        for start in ids:
            seen = {start}
            cur = parents[start]
            while cur is not None:
                if cur in seen:
                    raise CyclicVoHierarchy(f"VO parent cycle through {cur}")
                seen.add(cur)
                cur = parents[cur]
        for target, callers in self.allow.items():
            for s in (target, *callers):
                if s not in names:
                    raise MalformedConfig(f"ALLOW refers to unknown site {s}")
        for a, b in self.links:
            if a not in names or b not in names:
                raise MalformedConfig(f"LINK refers to unknown site {a}->{b}")
        for s, table in self.users.items():
            if s not in names:
                raise MalformedConfig(f"USER refers to unknown site {s}")
            for user, rights in table.items():
                if not rights <= RIGHTS:
                    raise MalformedConfig(f"user {user}: unknown rights {sorted(rights - RIGHTS)}")
        for s in names:
            if self.certificates.active(s) is None and not any(c.site == s for c in self.certificates):
                self.certificates.add(HostCertificate(s, 1))

    # -- queries
    @property
    def site_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.sites)

    def site(self, name: str) -> SiteId:
        for s in self.sites:
            if s.name == name:
                return s
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return name in self.site_names

    def link(self, src: str, dst: str) -> LinkSpec:
        link = self.links.get((src, dst))
        if link is None:
            link = LinkSpec(src, dst, self.default_bandwidth, self.default_latency, self.default_grid_overhead)
        return link

    def admits(self, target: str, caller: str) -> bool:
        """IP-allowlist check, realized over site names. Unlisted targets admit everyone."""
        if target == caller:
            return True
        allowed = self.allow.get(target)
        return allowed is None or caller in allowed

    def vo_of(self, site: str) -> Vo:
        for v in self.vos:
            if site in v.sites:
                return v
        raise KeyError(site)

    def vo_scope(self, site: str) -> list[str]:
        """Own VO followed by its ancestors (hierarchical read-up)."""
        parents = {v.id: v.parent for v in self.vos}
        chain = [self.vo_of(site).id]
        while parents[chain[-1]] is not None:
            chain.append(parents[chain[-1]])
        return chain

    def in_scope(self, caller: str, target: str) -> bool:
        if self.mode != "P2":
            return True
        return self.vo_of(target).id in self.vo_scope(caller)

    def scope_sites(self, site: str) -> list[str]:
        return [s for s in self.site_names if self.in_scope(site, s)]

    def site_key(self, site: str) -> bytes:
        return self.keys.get(site) or hashlib.sha256(f"hospigrid-site-key:{site}".encode()).digest()

    def dump(self) -> str:
        lines = [f"MODE {self.mode}"]
        lines += [f"SITE {s.name} {s.address or '-'}" for s in self.sites]
        if self.central:
            lines.append(f"CENTRAL {self.central}")
        for v in self.vos:
            parent = f" parent={v.parent}" if v.parent else ""
            lines.append(f"VO {v.id}{parent} {' '.join(v.sites)}")
        for target, callers in sorted(self.allow.items()):
            lines += [f"ALLOW {target} {c}" for c in sorted(callers)]
        lines += [link.line() for _, link in sorted(self.links.items())]
        for s, table in sorted(self.users.items()):
            lines += [f"USER {s} {u} {','.join(sorted(r))}" for u, r in sorted(table.items())]
        lines += [c.line() for c in self.certificates]
        return "".join(line + "\n" for line in lines)


def parse_rights(text: str) -> frozenset:
    if text == "all":
        return RIGHTS
    rights = frozenset(r for r in text.split(",") if r)
    if not rights <= RIGHTS:
        raise MalformedConfig(f"unknown rights {sorted(rights - RIGHTS)}")
    return rights


def parse_topology(text: str) -> Topology:
    mode = None
    sites: list[SiteId] = []
    central = None
    vos: list[Vo] = []
    allow: dict[str, set] = defaultdict(set)
    links: dict[tuple[str, str], LinkSpec] = {}
    users: dict[str, dict[str, frozenset]] = defaultdict(dict)
    certs: list[HostCertificate] = []
    keys: dict[str, bytes] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        word = parts[0]
        try:
            if word == "MODE" and len(parts) == 2:
                mode = parts[1]
            elif word == "SITE" and len(parts) in (2, 3):
                addr = parts[2] if len(parts) == 3 and parts[2] != "-" else ""
                sites.append(SiteId(parts[1], addr))
            elif word == "CENTRAL" and len(parts) == 2:
                central = parts[1]
            elif word == "VO" and len(parts) >= 2:
                parent = None
                members = parts[2:]
                if members and members[0].startswith("parent="):
                    parent = members[0][len("parent="):]
                    members = members[1:]
                vos.append(Vo(parts[1], tuple(members), parent))
            elif word == "ALLOW" and len(parts) == 3:
                allow[parts[1]].add(parts[2])
            elif word == "LINK":
                link = parse_link_line(line)
                links[(link.src, link.dst)] = link
            elif word == "USER" and len(parts) == 4:
                users[parts[1]][parts[2]] = parse_rights(parts[3])
            elif word == "CERT":
                certs.append(parse_cert_line(line))
            elif word == "KEY" and len(parts) == 3:
                keys[parts[1]] = bytes.fromhex(parts[2])
            else:
                raise MalformedConfig(f"line {lineno}: cannot parse {line!r}")
        except ValueError as exc:
            raise MalformedConfig(f"line {lineno}: {exc}") from None
    if mode is None:
        raise MalformedConfig("missing MODE line")
    if mode == "P1" and not sites:
        sites = [SiteId(s) for s in DEFAULT_P1_SITES]
        central = central or "cern"
    return Topology(
        mode=mode,
        sites=tuple(sites),
        central=central,
        vos=tuple(vos),
        allow={k: frozenset(v) for k, v in allow.items()},
        links=links,
        users=dict(users),
        certificates=CertificateRegistry(certs),
        keys=keys,
    )


def load_topology(path) -> Topology:
    return parse_topology(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- sessions


@dataclass(frozen=True)
class Session:
    session_id: str
    user: str
    home_site: str
    rights: frozenset
    opened_at: Fraction = Fraction(0)

    def __repr__(self) -> str:
        return f"Session({self.user}@{self.home_site}, rights={sorted(self.rights)})"


def open_session(user: str, cert: HostCertificate, requested_rights, topology: Topology,
                 opened_at=Fraction(0)) -> Session:
    """Authenticate ``user`` at the certificate's site and grant
    requested ∩ registered rights."""
    if not topology.certificates.is_active(cert):
        raise RevokedCertificate(f"{cert.site} serial {cert.serial}")
    granted = topology.users.get(cert.site, {}).get(user)
    if granted is None:
        raise UnknownUser(f"{user} at {cert.site}")
    requested = RIGHTS if requested_rights is None else frozenset(requested_rights)
    return Session(secrets.token_hex(16), user, cert.site, frozenset(requested & granted), Fraction(opened_at))


class GasFactory:
    """Per-site access service factory: one session instance per login."""

    def __init__(self, site: str, topology: Topology, clock=None):
        self.site = site
        self.topology = topology
        self.clock = clock
        self.sessions: dict[str, Session] = {}
        self._lock = threading.Lock()

    def open(self, user: str, requested_rights=None, cert: HostCertificate | None = None) -> Session:
        cert = cert or self.topology.certificates.active(self.site)
        if cert is None:
            raise RevokedCertificate(f"{self.site} has no active host certificate")
        now = self.clock.now if self.clock is not None else Fraction(0)
        session = open_session(user, cert, requested_rights, self.topology, now)
        with self._lock:
            self.sessions[session.session_id] = session
        return session

    def close(self, session_id: str) -> None:
        with self._lock:
            self.sessions.pop(session_id, None)


# ---------------------------------------------------------------- authorization


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.allowed


ALLOW = Decision(True)


def authorize(session: Session, op: str, target_site: str, topology: Topology) -> Decision:
    if op not in RIGHTS:
        raise ValueError(f"unknown operation kind {op!r}")
    if op not in session.rights:
        return Decision(False, "MissingRight")
    caller = session.home_site
    if not topology.in_scope(caller, target_site):
        return Decision(False, "VoBoundary")
    if not topology.admits(target_site, caller):
        return Decision(False, "NotAllowlisted")
    return ALLOW


# ---------------------------------------------------------------- WAN audit


@dataclass(frozen=True)
class AuditSnapshot:
    """Message and byte counters keyed by (from, to, message class)."""

    counters: dict = field(default_factory=dict)

    def _select(self, src=None, dst=None, classes=None):
        for (a, b, cls), (m, n) in self.counters.items():
            if (src is None or a == src) and (dst is None or b == dst) and (classes is None or cls in classes):
                yield m, n

    def messages(self, src=None, dst=None, classes=None) -> int:
        return sum(m for m, _ in self._select(src, dst, classes))

    def bytes(self, src=None, dst=None, classes=None) -> int:
        return sum(n for _, n in self._select(src, dst, classes))

    @property
    def messages_sent(self) -> int:
        return self.messages()

    @property
    def bytes_sent(self) -> int:
        return self.bytes()

    def pairs(self) -> set[tuple[str, str]]:
        return {(a, b) for (a, b, _), (m, _) in self.counters.items() if m}

    def rows(self) -> list[tuple[str, str, str, int, int]]:
        return [(a, b, c, m, n) for (a, b, c), (m, n) in sorted(self.counters.items()) if m]

    def __sub__(self, other: "AuditSnapshot") -> "AuditSnapshot":
        out = {}
        for key, (m, n) in self.counters.items():
            m0, n0 = other.counters.get(key, (0, 0))
            if m - m0 or n - n0:
                out[key] = (m - m0, n - n0)
        return AuditSnapshot(out)


class WanAudit:
    """Shared, monotonically increasing WAN counters.

    When ``capture`` is on, every payload is kept for leak scans.
    """

    def __init__(self, capture: bool = False):
        self.capture = capture
        self._counters: dict[tuple[str, str, str], list[int]] = defaultdict(lambda: [0, 0])
        self.payloads: list[tuple[str, str, str, bytes]] = []
        self._lock = threading.Lock()

    def record(self, src: str, dst: str, cls: str, payload: bytes) -> None:
        with self._lock:
            c = self._counters[(src, dst, cls)]
            c[0] += 1
            c[1] += len(payload)
            if self.capture:
                self.payloads.append((src, dst, cls, bytes(payload)))

    def snapshot(self) -> AuditSnapshot:
        with self._lock:
            return AuditSnapshot({k: (v[0], v[1]) for k, v in self._counters.items()})

    @contextmanager
    def profile(self):
        """Counters accumulated inside the ``with`` block."""
        before = self.snapshot()
        result = _Profile()
        try:
            yield result
        finally:
            result.counters = (self.snapshot() - before).counters


class _Profile(AuditSnapshot):
    def __init__(self):
        object.__setattr__(self, "counters", {})

    def __setattr__(self, name, value):
        object.__setattr__(self, name, value)


def wan_profile(audit: WanAudit, scenario) -> AuditSnapshot:
    """Run ``scenario()`` and return exactly the WAN traffic it caused."""
    before = audit.snapshot()
    scenario()
    return audit.snapshot() - before


def leak_scan(payloads, secrets_: list[str], min_len: int = 3) -> list[tuple[str, str, str, str]]:
    """(from, to, class, secret) for every captured payload containing a
    plaintext personal value."""
    needles = [(s, s.encode("utf-8")) for s in secrets_ if len(s.encode("utf-8")) >= min_len]
    hits = []
    for src, dst, cls, payload in payloads:
        for text, raw in needles:
            if raw in payload:
                hits.append((src, dst, cls, text))
    return hits
