"""Acceptance criteria, one pass/fail line each.

Criteria 3 to 7 run under both transport backends; criterion 9 checks that
the socket run passes and yields exactly the same observations as the
in-process run (simulated timings are excluded from the comparison).
"""

from __future__ import annotations

import contextlib
import io
import random
import time
from fractions import Fraction

import pytest
from oracles import (
    ACCEPTANCE,
    brute_force,
    exact_transfer_time,
    random_placements,
    random_query,
    sha256_hex,
)
from support import all_rows, load_dataset, topology_text

from hospigrid import Grid, parse_topology
from hospigrid.cli import main
from hospigrid.errors import NotAuthorized
from hospigrid.gridio import PAPER_FILE_SIZE, VPN_BANDWIDTH, LinkSpec, transfer_time
from hospigrid.jobs import DataLocalPolicy, RandomPolicy
from hospigrid.model import parse_dicom_lite, serialize_dicom_lite
from hospigrid.query import Atom, QueryDoc
from hospigrid.federation import leak_scan
from hospigrid.synth import synth_bytes, synth_site_files

BACKENDS = ("inproc", "socket")
_OUTCOMES: dict[tuple[int, str], tuple[bool, object, str]] = {}


def report(n: int, backend: str | None, ok: bool, detail: str) -> None:
    label = f"criterion {n}" + (f" [{backend}]" if backend else "")
    line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
    print(line)
    ACCEPTANCE[f"{n:02d} {backend or ''}"] = line


# ---------------------------------------------------------------- 1, 2


def test_criterion_1_transfer_model():
    link = LinkSpec("a", "b", VPN_BANDWIDTH, 0, 0)
    start = time.perf_counter()
    t = transfer_time(PAPER_FILE_SIZE, link, "direct")
    elapsed = time.perf_counter() - start
    # [PAPER] 8.5 MB over 11 MB/s, 1 MB = 2**20 B; [DERIVED] 8.5 / 11 = 17 / 22
    expected = Fraction(17, 22)
    rel = abs(float(t) - float(expected)) / float(expected)
    ok = t == exact_transfer_time(8_912_896, 11_534_336) and rel <= 1e-12 and elapsed < 1e-3
    ok = ok and abs(float(t) - 0.7727272727272727) <= 1e-12
    report(1, None, ok, f"t={float(t):.13f} s rel_err={rel:.1e} runtime={elapsed * 1e6:.1f} us")
    assert ok


def test_criterion_2_grid_overhead():
    rng = random.Random(2)
    wins = 0
    for _ in range(50):
        nbytes = rng.randint(1, 50 * 2**20)
        link = LinkSpec("a", "b", Fraction(rng.randint(2**16, 2**27)),
                        Fraction(rng.randint(0, 100), 1000), Fraction(rng.randint(1, 2000), 1000))
        grid_t, direct_t = transfer_time(nbytes, link, "grid"), transfer_time(nbytes, link, "direct")
        oracle = exact_transfer_time(nbytes, link.bandwidth, link.latency, link.grid_overhead, grid=True)
        wins += grid_t > direct_t and grid_t == oracle
    report(2, None, wins == 50, f"grid > direct in {wins}/50 cases")
    assert wins == 50


# ---------------------------------------------------------------- 3 to 7, per backend


def criterion_3(backend: str):
    """Global query pipeline against a single-database brute-force scan."""
    fingerprint = []
    mismatches = 0
    for i in range(100):
        rng = random.Random(3000 + i)
        sites = ("s0", "s1", "s2", "s3")[: rng.randint(1, 4)]
        with Grid(parse_topology(topology_text("P1_5", sites)), backend=backend) as grid:
            load_dataset(grid, i, {s: rng.randint(1, 500) for s in sites})
            rows = all_rows(grid)
            doc = random_query(rng, rows)
            origin = rng.choice(sites)
            result = grid.query(grid.open_session("alice", origin), doc).result
        expected = brute_force(doc, rows)
        got = set(result.rows)
        if got != expected or len(result.rows) != len(got):
            mismatches += 1
        fingerprint.append(result.rows)
    return mismatches == 0, fingerprint, f"{100 - mismatches}/100 pairs equal"


def criterion_4(backend: str):
    """Local scope costs nothing on the WAN in P1.5, at least a round trip in P1."""
    fingerprint = []
    failures = []
    for i in range(20):
        rng = random.Random(4000 + i)
        hospitals = ("h1", "h2", "h3")
        counts = {s: rng.randint(5, 40) for s in hospitals}
        doc = QueryDoc("Local", ("image_id", "site_of_origin", "density"), "images",
                       Atom("modality", "=", "MG"))
        with Grid(parse_topology(topology_text("P1_5", hospitals)), backend=backend) as g15, \
             Grid(parse_topology(topology_text("P1", ("cn", *hospitals), central="cn")), backend=backend) as g1:
            load_dataset(g15, i, counts)
            load_dataset(g1, i, counts)
            site = rng.choice(hospitals)
            s15, s1 = g15.open_session("alice", site), g1.open_session("alice", site)
            with g15.audit.profile() as p15:
                local15 = g15.query(s15, doc).result
            with g1.audit.profile() as p1:
                local1 = g1.query(s1, doc).result
            glob15 = g15.query(s15, doc.with_scope("Global")).result
            glob1 = g1.query(s1, doc.with_scope("Global")).result
        if p15.messages_sent != 0 or p1.messages_sent < 2:
            failures.append((i, "messages", p15.messages_sent, p1.messages_sent))
        if set(glob15.rows) != set(glob1.rows) or set(local15.rows) != set(local1.rows):
            failures.append((i, "rows"))
        fingerprint.append((p15.messages_sent, p1.messages_sent, glob15.rows, local15.rows))
    return not failures, fingerprint, f"20 scenarios, failures={failures}"


def criterion_5(backend: str):
    """Mirror / get / cat over 100 randomized files."""
    rng = random.Random(5)
    sites = ("a", "b", "c", "d")
    failures = []
    fingerprint = []
    with Grid(parse_topology(topology_text("P1_5", sites)), backend=backend) as grid:
        sessions = {s: grid.open_session("alice", s) for s in sites}
        for i in range(100):
            home = rng.choice(sites)
            pixels = rng.randint(16, 4096)
            imported = grid.import_file(sessions[home], synth_bytes(50_000 + i, pixels))
            lfn = imported.lfn
            for target in rng.sample([s for s in sites if s != home], rng.randint(1, 3)):
                grid.mirror(lfn, target, sessions[rng.choice(sites)])
            guid, replicas = grid.lookup(lfn, home)
            # oracle: recompute every stored replica's digest
            stored = {r.site: sha256_hex(grid.node(r.site).storage.read(r.physical_path)) for r in replicas}
            hashes = {r.content_hash for r in replicas} | set(stored.values())
            if len(hashes) != 1:
                failures.append((lfn, "hash"))
            (h,) = hashes or {None}
            for r in replicas:
                fetcher = next(s for s in sites if s != r.site)
                data, _ = grid.node(fetcher).fetch(lfn, r)
                if sha256_hex(data) != h:
                    failures.append((lfn, "fetch", r.site))
            for s in sites:
                data, _ = grid.get(lfn, s, sessions[s])
                if sha256_hex(data) != h:
                    failures.append((lfn, "get", s))
                pixel_data = parse_dicom_lite(data).pixel_data
                shown = grid.cat(lfn, s, sessions[s]).encode("utf-8")
                if any(pixel_data[k:k + 8] in shown for k in range(0, len(pixel_data) - 7, 4)):
                    failures.append((lfn, "cat", s))
            fingerprint.append((lfn, guid, h, sorted(r.site for r in replicas)))
    return not failures, fingerprint, f"100 files, failures={failures[:5]}"


def criterion_6(backend: str):
    """DataLocal incurs no WAN bytes; Random matches the reference generator."""
    failures = []
    fingerprint = []
    for w in range(100):
        rng = random.Random(6000 + w)
        sites = ("a", "b", "c", "d")[: rng.randint(2, 4)]
        files = [(rng.choice(sites), synth_bytes(60_000 + w * 100 + k, rng.randint(8, 512)))
                 for k in range(rng.randint(2, 6))]
        mirrors = [(rng.randrange(len(files)), rng.choice(sites)) for _ in range(rng.randint(0, 3))]
        jobs = [(rng.choice(("SMF", "CADe")), rng.randrange(len(files))) for _ in range(rng.randint(3, 10))]
        origin, seed = rng.choice(sites), rng.getrandbits(64)

        def run(policy):
            with Grid(parse_topology(topology_text("P1_5", sites)), backend=backend) as grid:
                holders, sizes, lfns, stored = [], [], [], []
                for home, data in files:
                    r = grid.import_file(grid.open_session("alice", home), data)
                    lfns.append(r.lfn)
                    sizes.append(r.size_bytes)
                    holders.append({home})
                    stored.append(grid.node(home).storage.read(grid.lookup(r.lfn, home)[1][0].physical_path))
                for idx, target in mirrors:
                    if target not in holders[idx]:
                        grid.mirror(lfns[idx], target, grid.open_session("alice", origin))
                        holders[idx].add(target)
                session = grid.open_session("alice", origin)
                outcomes = [grid.submit(session, kind, [lfns[idx]], policy) for kind, idx in jobs]
            return outcomes, holders, sizes, stored

        local, holders, sizes, stored = run(DataLocalPolicy())
        rand, _, _, _ = run(RandomPolicy(seed))
        local_total = sum(o.placement.wan_bytes_incurred for o in local)
        chosen = random_placements(seed, list(sites), len(jobs))
        oracle_total = sum(0 if site in holders[idx] else sizes[idx] for site, (_, idx) in zip(chosen, jobs))
        rand_total = sum(o.placement.wan_bytes_incurred for o in rand)
        if local_total != 0:
            failures.append((w, "datalocal", local_total))
        if rand_total != oracle_total or [o.placement.chosen_site for o in rand] != chosen:
            failures.append((w, "random", rand_total, oracle_total))
        for (kind, idx), a, b in zip(jobs, local, rand):
            reference = sha256_hex(_stub_reference(kind, stored[idx]))
            if not (a.result.digest == b.result.digest == reference):
                failures.append((w, "digest"))
        fingerprint.append((rand_total, [o.result.digest for o in rand]))
    return not failures, fingerprint, f"100 workloads, failures={failures[:5]}"


def _stub_reference(kind: str, data: bytes) -> bytes:
    """Placement-free reference output built straight from the container."""
    f = parse_dicom_lite(data)
    if kind == "SMF":
        inverted = bytes(b ^ 0xFF for b in f.pixel_data)
        return serialize_dicom_lite(type(f)(f.tags + (("SMF", "done"),), inverted))
    from hospigrid.jobs import cade_stub

    return cade_stub(data)


P2_TOPOLOGY = """MODE P2
SITE eu -
SITE ox -
SITE cb -
SITE pi -
SITE ro -
SITE ed -
VO europe eu
VO uk parent=europe ox cb
VO italy parent=europe pi ro
VO scotland parent=uk ed
ALLOW cb ox
USER eu alice all
USER ox alice all
USER cb alice all
USER pi alice all
USER ro alice all
USER ed alice all
USER ox reader read
USER pi clerk query_local
USER ro runner read,query_local,query_global
"""
# hand-derived scope: own VO plus ancestors
P2_SCOPE = {"eu": {"eu"}, "ox": {"ox", "cb", "eu"}, "cb": {"ox", "cb", "eu"},
            "pi": {"pi", "ro", "eu"}, "ro": {"pi", "ro", "eu"}, "ed": {"ed", "ox", "cb", "eu"}}


def criterion_7(backend: str):
    """Denials are side-effect free, payloads carry no identity, VO scope holds."""
    rng = random.Random(7)
    failures = []
    with Grid(parse_topology(P2_TOPOLOGY), backend=backend, capture_payloads=True) as grid:
        originals = {}
        for site in P2_SCOPE:
            session = grid.open_session("alice", site)
            originals[site] = synth_site_files(70, site, 6, pixel_bytes=4096)
            for data in originals[site]:
                grid.import_file(session, data)
        admin = {s: grid.open_session("alice", s) for s in P2_SCOPE}
        reader = grid.open_session("reader", "ox")
        clerk = grid.open_session("clerk", "pi")
        runner = grid.open_session("runner", "ro")
        # a full scenario: global queries, replication, reads, jobs
        for site in P2_SCOPE:
            grid.query(admin[site], QueryDoc("Global", ("image_id", "lfn", "patient_pseudonym"), "images"))
        grid.mirror("/mammogrid/eu/EU00000.dcml", "ox", admin["ox"])
        grid.mirror("/mammogrid/ox/OX00001.dcml", "cb", admin["ox"])
        grid.get("/mammogrid/eu/EU00001.dcml", "pi", admin["pi"])
        grid.cat("/mammogrid/cb/CB00002.dcml", "ox", admin["ox"])
        grid.submit(admin["ro"], "SMF", ["/mammogrid/pi/PI00000.dcml"], RandomPolicy(1))
        grid.submit(admin["cb"], "CADe", ["/mammogrid/ox/OX00000.dcml"], DataLocalPolicy())

        lfn = lambda s, k: f"/mammogrid/{s}/{s.upper()}{k:05d}.dcml"  # noqa: E731
        denied_ops = [
            lambda: grid.import_file(reader, synth_bytes(rng.getrandbits(20), 64)),
            lambda: grid.query(reader, QueryDoc("Global", ("image_id",), "images")),
            lambda: grid.query(clerk, QueryDoc("Global", ("image_id",), "images")),
            lambda: grid.query(reader, QueryDoc("Local", ("image_id",), "images")),
            lambda: grid.mirror(lfn("ox", rng.randrange(6)), "pi", admin["ox"]),
            lambda: grid.mirror(lfn("eu", rng.randrange(6)), "ro", admin["cb"]),
            lambda: grid.mirror(lfn("eu", rng.randrange(6)), "cb", admin["eu"]),
            lambda: grid.mirror(lfn("ro", rng.randrange(6)), "cb", admin["pi"]),
            lambda: grid.mirror(lfn("ox", rng.randrange(6)), "cb", admin["ed"]),
            lambda: grid.submit(reader, "SMF", [lfn("ox", rng.randrange(6))], DataLocalPolicy()),
            lambda: grid.submit(runner, "CADe", [lfn("ro", rng.randrange(6))], RandomPolicy(3)),
            lambda: grid.get(lfn("ox", rng.randrange(6)), "pi", clerk),
            lambda: grid.cat(lfn("pi", rng.randrange(6)), "pi", clerk),
        ]
        denied = unchanged = 0
        for k in range(130):
            op = denied_ops[k % len(denied_ops)]
            before = grid.snapshot()
            try:
                op()
            except NotAuthorized:
                denied += 1
                unchanged += grid.snapshot() == before
            else:
                failures.append(("not denied", k % len(denied_ops)))
        if unchanged != denied or denied != 130:
            failures.append(("denials", denied, unchanged))

        secrets_ = set()
        for blobs in originals.values():
            for data in blobs:
                f = parse_dicom_lite(data)
                secrets_ |= {f["PatientName"], f["PatientID"]}
        leaks = sum(1 for *_, p in grid.audit.payloads for s in secrets_ if s.encode() in p)
        if leaks or leak_scan(grid.audit.payloads, sorted(secrets_)):
            failures.append(("leaks", leaks))

        out_of_scope = sum(m for (src, dst, cls), (m, _) in grid.audit.snapshot().counters.items()
                           if cls == "query" and dst not in P2_SCOPE[src])
        if out_of_scope:
            failures.append(("cross-vo queries", out_of_scope))
        fingerprint = (denied, unchanged, leaks, out_of_scope, len(grid.audit.payloads),
                       grid.audit.snapshot().rows())
    return not failures, fingerprint, (
        f"denied={denied} unchanged={unchanged} leaks={leaks} payloads={len(grid.audit.payloads)} "
        f"out_of_scope_subqueries={out_of_scope} failures={failures[:3]}")


CRITERIA = {3: criterion_3, 4: criterion_4, 5: criterion_5, 6: criterion_6, 7: criterion_7}


def outcome(n: int, backend: str):
    if (n, backend) not in _OUTCOMES:
        start = time.perf_counter()
        ok, fingerprint, detail = CRITERIA[n](backend)
        _OUTCOMES[(n, backend)] = (ok, fingerprint, detail, time.perf_counter() - start)
    return _OUTCOMES[(n, backend)]


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criteria_3_to_7(n, backend):
    ok, _, detail, elapsed = outcome(n, backend)
    if n == 3 and backend == "inproc":
        ok = ok and elapsed < 30
    report(n, backend, ok, f"{detail} ({elapsed:.1f} s)")
    assert ok


# ---------------------------------------------------------------- 8, 9


def _run_bundled_suite() -> tuple[int, str, float]:
    out = io.StringIO()
    start = time.perf_counter()
    with contextlib.redirect_stdout(out):
        status = main(["--script", "@deployment"])
    return status, out.getvalue(), time.perf_counter() - start


def test_criterion_8_end_to_end_suite():
    s1, t1, e1 = _run_bundled_suite()
    s2, t2, e2 = _run_bundled_suite()
    imports = t1.count("\n> import ")  # 20 files plus two refused duplicates
    ok = s1 == s2 == 0 and t1 == t2 and max(e1, e2) < 10 and "ASSERTION FAILED" not in t1
    ok = ok and imports == 20 + 2 and t1.count("\n> submit ") == 3
    report(8, None, ok, f"exit={s1},{s2} identical={t1 == t2} imports={imports} "
                        f"wall={e1:.2f}s,{e2:.2f}s")
    assert ok


def test_criterion_9_backend_equivalence():
    lines = []
    ok = True
    for n in sorted(CRITERIA):
        a_ok, a_fp, _, _ = outcome(n, "inproc")
        b_ok, b_fp, _, _ = outcome(n, "socket")
        same = a_fp == b_fp
        ok = ok and a_ok and b_ok and same
        lines.append(f"{n}:{'ok' if b_ok and same else 'DIFF'}")
    report(9, None, ok, "socket vs inproc " + " ".join(lines))
    assert ok
