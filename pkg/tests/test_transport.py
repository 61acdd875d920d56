from __future__ import annotations

import socket
import threading
from fractions import Fraction

import pytest
from support import topology_text

from hospigrid.errors import NotAllowlisted, SiteUnavailable, UnknownLfn
from hospigrid.federation import WanAudit, parse_topology
from hospigrid.gridio import transfer_time
from hospigrid.transport import (
    Envelope,
    SimClock,
    encode_frame,
    make_transport,
    read_frame,
)

BACKENDS = ["inproc", "socket"]


class Recorder:
    """Handler that logs arrivals and echoes or fails on request."""

    def __init__(self):
        self.seen: list[tuple[str, bytes]] = []
        self.lock = threading.Lock()

    def __call__(self, env: Envelope):
        with self.lock:
            self.seen.append((env.src, env.payload))
        if env.kind == "FAIL":
            raise UnknownLfn("/m/missing")
        if env.kind == "NOTE":
            return None
        return ("control", "ECHO", env.payload)


@pytest.fixture(params=BACKENDS)
def bus(request):
    topo = parse_topology(topology_text("P1_5", ("a", "b", "c"), extra="ALLOW c a\n"))
    t = make_transport(request.param, topo, SimClock(), WanAudit())
    handlers = {s: Recorder() for s in ("a", "b", "c")}
    for s, h in handlers.items():
        t.bind(s, h)
    t.recorders = handlers
    yield t
    t.close()


def test_sends_arrive_in_order_and_are_audited(bus):
    payloads = [f"m{i}".encode() * (i + 1) for i in range(20)]
    for p in payloads:
        bus.send(bus.envelope("a", "b", "control", "NOTE", p))
    assert [p for _, p in bus.recorders["b"].seen] == payloads
    snap = bus.audit.snapshot()
    assert snap.messages(src="a", dst="b") == 20
    assert snap.bytes(src="a", dst="b") == sum(len(p) for p in payloads)


def test_message_ids_increase_per_sender(bus):
    ids = [bus.envelope("a", "b", "control", "NOTE").msg_id for _ in range(5)]
    assert ids == sorted(ids) and len(set(ids)) == 5


def test_stopped_site_is_unavailable_and_unaudited(bus):
    bus.stop_site("b")
    before = bus.audit.snapshot()
    with pytest.raises(SiteUnavailable):
        bus.send(bus.envelope("a", "b", "control", "NOTE", b"x"))
    with pytest.raises(SiteUnavailable):
        bus.call("a", "b", "control", "ECHO", b"x")
    assert bus.audit.snapshot() == before
    bus.start_site("b")
    assert bus.call("a", "b", "control", "ECHO", b"back").payload == b"back"


def test_allowlist_is_enforced_before_sending(bus):
    before = bus.audit.snapshot()
    with pytest.raises(NotAllowlisted):
        bus.call("b", "c", "control", "ECHO", b"x")
    assert bus.audit.snapshot() == before
    assert bus.call("a", "c", "control", "ECHO", b"ok").payload == b"ok"


def test_echo_request_correlates_and_counts_twice(bus):
    before = bus.audit.snapshot()
    env = bus.envelope("a", "b", "control", "ECHO", b"ping")
    resp = bus.request(env)
    assert resp.corr == env.msg_id and resp.payload == b"ping"
    assert (resp.src, resp.dst) == ("b", "a")
    delta = bus.audit.snapshot() - before
    assert delta.messages_sent == 2 and delta.bytes_sent == 8


def test_remote_errors_are_reraised(bus):
    with pytest.raises(UnknownLfn):
        bus.call("a", "b", "control", "FAIL", b"")


def test_simulated_delay_follows_the_link(bus):
    link = bus.topology.link("a", "b")
    back = bus.topology.link("b", "a")
    t0 = bus.clock.now
    resp = bus.call("a", "b", "control", "ECHO", b"x" * 1000)
    assert resp.delivered_at - t0 == transfer_time(1000, link, "grid") + transfer_time(1000, back, "grid")


def test_slow_responder_times_out(bus):
    if bus.backend == "socket":
        bus.set_response_delay("b", "0.5")
        timeout = Fraction(1, 5)
    else:
        bus.set_response_delay("b", 10)
        timeout = Fraction(5)
    t0 = bus.clock.now
    with pytest.raises(SiteUnavailable):
        bus.call("a", "b", "control", "ECHO", b"x", timeout=timeout)
    assert bus.clock.now - t0 >= timeout
    bus.set_response_delay("b", 0)


def test_clock_is_monotonic():
    clock = SimClock()
    clock.advance(Fraction(1, 3))
    assert clock.advance_to(0) == Fraction(1, 3)
    assert clock.advance_to(2) == 2


# ---------------------------------------------------------------- framing


def test_frame_layout():
    frame = encode_frame("ENV 1\ta", b"\x00\n\xff")
    assert frame[:4] == (len(frame) - 4).to_bytes(4, "big")
    assert frame[4:] == b"ENV 1\ta\n\x00\n\xff"


def test_frames_round_trip_over_a_socket_pair():
    left, right = socket.socketpair()
    with left, right:
        env = Envelope(7, "a", "b", "transfer", "DATA", bytes(range(256)) * 10, Fraction(3, 7), 4)
        left.sendall(encode_frame(env.header(), env.payload))
        left.sendall(encode_frame("ENV x", b""))
        line, payload = read_frame(right)
        again = Envelope.from_header(line, payload)
        assert (again.msg_id, again.src, again.dst, again.cls, again.kind, again.corr) == (7, "a", "b", "transfer", "DATA", 4)
        assert again.payload == env.payload and again.sent_at == Fraction(3, 7)
        assert read_frame(right) == ("ENV x", b"")
        left.close()
        assert read_frame(right) is None


def test_unknown_backend():
    with pytest.raises(ValueError):
        make_transport("carrier-pigeon", parse_topology(topology_text()))
