"""Inter-site message transport.

Two interchangeable backends deliver :class:`Envelope` objects to per-site
handlers and feed the shared :class:`~hospigrid.federation.WanAudit`:

* :class:`InProcessBus` - synchronous and deterministic; each message is
  delayed on the virtual clock by ``transfer_time(len(payload), link, "grid")``
  and messages are delivered one at a time in send order.
* :class:`SocketTransport` - one TCP listener per hosted site. Frames are a
  4-byte big-endian length, then ``header line + "\\n" + payload``.

A handler receives the request envelope and returns ``(class, kind, payload)``
for the response (``None`` for one-way messages). Handlers that raise a
:class:`HospigridError` produce an ``ERR`` response which the caller re-raises.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

from .errors import HospigridError, NotAllowlisted, SiteUnavailable, rebuild
from .gridio import transfer_time
from .textio import join_fields, split_fields

log = logging.getLogger(__name__)

CLASSES = ("query", "result", "transfer", "job", "control")
DEFAULT_TIMEOUT = Fraction(5)

Handler = Callable[["Envelope"], "tuple[str, str, bytes] | None"]


class SimClock:
    """Shared monotonic virtual clock (exact rational seconds)."""

    def __init__(self, start=0):
        self._now = Fraction(start)
        self._lock = threading.Lock()

    @property
    def now(self) -> Fraction:
        return self._now

    def advance(self, dt) -> Fraction:
        with self._lock:
            self._now += Fraction(dt)
            return self._now

    def advance_to(self, t) -> Fraction:
        with self._lock:
            self._now = max(self._now, Fraction(t))
            return self._now


@dataclass
class Envelope:
    msg_id: int
    src: str
    dst: str
    cls: str
    kind: str
    payload: bytes = b""
    sent_at: Fraction = Fraction(0)
    corr: int = 0
    delivered_at: Fraction | None = None

    def header(self) -> str:
        return "ENV " + join_fields([self.msg_id, self.src, self.dst, self.cls, self.kind, self.corr, self.sent_at])

    @classmethod
    def from_header(cls, line: str, payload: bytes) -> "Envelope":
        if not line.startswith("ENV "):
            raise ValueError(f"bad envelope header {line!r}")
        msg_id, src, dst, kls, kind, corr, sent_at = split_fields(line[4:])
        return cls(int(msg_id), src, dst, kls, kind, payload, Fraction(sent_at), int(corr))


def error_payload(exc: HospigridError) -> bytes:
    return join_fields([type(exc).__name__, *exc.wire_args()]).encode("utf-8")


def raise_error_payload(payload: bytes):
    name, *args = split_fields(payload.decode("utf-8"))
    raise rebuild(name, args)


class Transport:
    backend = "base"

    def __init__(self, topology, clock: SimClock | None = None, audit=None):
        from .federation import WanAudit

        self.topology = topology
        self.clock = clock or SimClock()
        self.audit = audit if audit is not None else WanAudit()
        self.handlers: dict[str, Handler] = {}
        self.delays: dict[str, Fraction] = {}
        self._ids: dict[str, int] = {}
        self._id_lock = threading.Lock()

    # -- plumbing
    def bind(self, site: str, handler: Handler) -> None:
        self.handlers[site] = handler

    def unbind(self, site: str) -> None:
        self.handlers.pop(site, None)

    def set_response_delay(self, site: str, seconds) -> None:
        self.delays[site] = Fraction(seconds)

    def next_id(self, src: str) -> int:
        with self._id_lock:
            self._ids[src] = self._ids.get(src, 0) + 1
            return self._ids[src]

    def envelope(self, src: str, dst: str, cls: str, kind: str, payload: bytes = b"") -> Envelope:
        if cls not in CLASSES:
            raise ValueError(f"unknown message class {cls!r}")
        return Envelope(self.next_id(src), src, dst, cls, kind, bytes(payload))

    def delay(self, env: Envelope) -> Fraction:
        return transfer_time(len(env.payload), self.topology.link(env.src, env.dst), "grid")

    def _admit(self, env: Envelope) -> None:
        if env.dst not in self.topology:
            raise SiteUnavailable(f"unknown site {env.dst}")
        if not self.topology.admits(env.dst, env.src):
            raise NotAllowlisted(f"{env.dst} does not admit {env.src}")

    def is_up(self, site: str) -> bool:
        raise NotImplementedError

    def stop_site(self, site: str) -> None:
        raise NotImplementedError

    def start_site(self, site: str) -> None:
        raise NotImplementedError

    def send(self, env: Envelope) -> Envelope:
        raise NotImplementedError

    def request(self, env: Envelope, timeout=DEFAULT_TIMEOUT) -> Envelope:
        raise NotImplementedError

    def call(self, src: str, dst: str, cls: str, kind: str, payload: bytes = b"",
             timeout=DEFAULT_TIMEOUT) -> Envelope:
        return self.request(self.envelope(src, dst, cls, kind, payload), timeout)

    def close(self) -> None:
        pass


def _invoke(handler: Handler, env: Envelope, clock: SimClock, responder: str, ids) -> Envelope | None:
    try:
        out = handler(env)
    except HospigridError as exc:
        out = ("control", "ERR", error_payload(exc))
    if out is None:
        return None
    cls, kind, payload = out
    return Envelope(ids(responder), responder, env.src, cls, kind, bytes(payload), clock.now, env.msg_id)


class InProcessBus(Transport):
    backend = "inproc"

    def __init__(self, topology, clock=None, audit=None):
        super().__init__(topology, clock, audit)
        self.down: set[str] = set()
        self.deliveries: list[Envelope] = []
        self.keep_deliveries = False

    def is_up(self, site: str) -> bool:
        return site in self.handlers and site not in self.down

    def stop_site(self, site: str) -> None:
        self.down.add(site)

    def start_site(self, site: str) -> None:
        self.down.discard(site)

    def _deliver(self, env: Envelope) -> None:
        env.sent_at = self.clock.now
        env.delivered_at = self.clock.advance_to(env.sent_at + self.delay(env))
        self.audit.record(env.src, env.dst, env.cls, env.payload)
        if self.keep_deliveries:
            self.deliveries.append(env)

    def send(self, env: Envelope) -> Envelope:
        self._admit(env)
        if not self.is_up(env.dst):
            raise SiteUnavailable(env.dst)
        self._deliver(env)
        _invoke(self.handlers[env.dst], env, self.clock, env.dst, self.next_id)
        return env

    def request(self, env: Envelope, timeout=DEFAULT_TIMEOUT) -> Envelope:
        self._admit(env)
        if not self.is_up(env.dst):
            raise SiteUnavailable(env.dst)
        processing = self.delays.get(env.dst, Fraction(0))
        if self.delay(env) + processing > Fraction(timeout):
            self._deliver(env)
            self.clock.advance_to(env.sent_at + Fraction(timeout))
            raise SiteUnavailable(f"{env.dst} did not answer within {timeout}s")
        self._deliver(env)
        self.clock.advance(processing)
        resp = _invoke(self.handlers[env.dst], env, self.clock, env.dst, self.next_id)
        if resp is None:
            raise SiteUnavailable(f"{env.dst} sent no response")
        self._deliver(resp)
        if resp.kind == "ERR":
            raise_error_payload(resp.payload)
        return resp


# ---------------------------------------------------------------- sockets

_LEN = struct.Struct(">I")
MAX_FRAME = 1 << 31


def encode_frame(header: str, payload: bytes = b"") -> bytes:
    body = header.encode("utf-8") + b"\n" + payload
    return _LEN.pack(len(body)) + body


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> tuple[str, bytes] | None:
    head = sock.recv(4)
    if not head:
        return None
    if len(head) < 4:
        head += _recv_exact(sock, 4 - len(head))
    (n,) = _LEN.unpack(head)
    if n > MAX_FRAME:
        raise ConnectionError(f"frame of {n} bytes exceeds limit")
    body = _recv_exact(sock, n)
    line, sep, payload = body.partition(b"\n")
    if not sep:
        raise ConnectionError("frame without header line")
    return line.decode("utf-8"), payload


def parse_endpoint(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {address!r}")
    return host, int(port)


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class SocketTransport(Transport):
    """TCP backend. Sites bound in this process get a listener; any other
    site is reached at the endpoint declared in the topology."""

    backend = "socket"

    def __init__(self, topology, clock=None, audit=None, host: str = "127.0.0.1"):
        super().__init__(topology, clock, audit)
        self.host = host
        self.servers: dict[str, _Server] = {}
        self.endpoints: dict[str, tuple[str, int]] = {}
        for s in topology.sites:
            if s.address:
                self.endpoints[s.name] = parse_endpoint(s.address)

    def bind(self, site: str, handler: Handler) -> None:
        super().bind(site, handler)
        self.start_site(site)

    def start_site(self, site: str) -> None:
        if site in self.servers:
            return
        transport = self
        handler = self.handlers[site]

        class _Conn(socketserver.BaseRequestHandler):
            def handle(self):
                while True:
                    try:
                        frame = read_frame(self.request)
                    except (ConnectionError, OSError):
                        return
                    if frame is None:
                        return
                    line, payload = frame
                    env = Envelope.from_header(line, payload)
                    wait = transport.delays.get(site, Fraction(0))
                    if wait:
                        time.sleep(float(wait))
                    resp = _invoke(handler, env, transport.clock, site, transport.next_id)
                    try:
                        if resp is None:
                            self.request.sendall(encode_frame(f"ACK {env.msg_id}"))
                        else:
                            self.request.sendall(encode_frame(resp.header(), resp.payload))
                    except OSError:
                        return

        declared = self.endpoints.get(site)
        host, port = declared if declared else (self.host, 0)
        server = _Server((host, port), _Conn)
        self.endpoints[site] = server.server_address[:2]
        self.servers[site] = server
        threading.Thread(target=server.serve_forever, kwargs={"poll_interval": 0.01},
                         name=f"site-{site}", daemon=True).start()

    def stop_site(self, site: str) -> None:
        server = self.servers.pop(site, None)
        if server is not None:
            server.shutdown()
            server.server_close()

    def is_up(self, site: str) -> bool:
        return site in self.servers if site in self.handlers else site in self.endpoints

    def _exchange(self, env: Envelope, timeout) -> tuple[str, bytes]:
        """Ship ``env`` and wait for the reply frame.

        Raises SiteUnavailable with ``delivered`` set when the request left
        but no answer came back in time.
        """
        endpoint = self.endpoints.get(env.dst)
        if endpoint is None:
            raise SiteUnavailable(env.dst)
        try:
            sock = socket.create_connection(endpoint, timeout=float(timeout))
        except OSError as exc:
            raise SiteUnavailable(f"{env.dst}: {exc}") from None
        with sock:
            try:
                sock.sendall(encode_frame(env.header(), env.payload))
                frame = read_frame(sock)
            except (OSError, ConnectionError) as exc:
                err = SiteUnavailable(f"{env.dst}: {exc}")
                err.delivered = True
                raise err from None
        if frame is None:
            err = SiteUnavailable(f"{env.dst} closed the connection")
            err.delivered = True
            raise err
        return frame

    def _precheck(self, env: Envelope) -> None:
        self._admit(env)
        if env.dst in self.handlers and env.dst not in self.servers:
            raise SiteUnavailable(env.dst)

    def send(self, env: Envelope) -> Envelope:
        self._precheck(env)
        env.sent_at = self.clock.now
        arrival = env.sent_at + self.delay(env)
        self.clock.advance_to(arrival)
        self._exchange(env, DEFAULT_TIMEOUT)
        env.delivered_at = arrival
        self.audit.record(env.src, env.dst, env.cls, env.payload)
        return env

    def request(self, env: Envelope, timeout=DEFAULT_TIMEOUT) -> Envelope:
        self._precheck(env)
        env.sent_at = self.clock.now
        arrival = env.sent_at + self.delay(env)
        self.clock.advance_to(arrival)
        try:
            line, payload = self._exchange(env, timeout)
        except SiteUnavailable as exc:
            if getattr(exc, "delivered", False):
                self.audit.record(env.src, env.dst, env.cls, env.payload)
                self.clock.advance_to(env.sent_at + Fraction(timeout))
            raise
        env.delivered_at = arrival
        self.audit.record(env.src, env.dst, env.cls, env.payload)
        resp = Envelope.from_header(line, payload)
        resp.delivered_at = self.clock.advance_to(resp.sent_at + self.delay(resp))
        self.audit.record(resp.src, resp.dst, resp.cls, resp.payload)
        if resp.kind == "ERR":
            raise_error_payload(resp.payload)
        return resp

    def close(self) -> None:
        for site in list(self.servers):
            self.stop_site(site)


def make_transport(backend: str, topology, clock=None, audit=None) -> Transport:
    if backend == "inproc":
        return InProcessBus(topology, clock, audit)
    if backend == "socket":
        return SocketTransport(topology, clock, audit)
    raise ValueError(f"unknown backend {backend!r}")
