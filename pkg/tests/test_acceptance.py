"""Acceptance criteria, one test each, every one printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` to see the summary lines
next to the test names.
"""

from __future__ import annotations

import fnmatch
import itertools
import random
import time

import pytest

import oracles
from conftest import OWNER_KEY, Clock, delta_records, linked_pair, make_db, quiesce, sync
from microdb import cli
from microdb.engine import REGISTRY_STORE, Microdatabase
from microdb.errors import ImmutableStore, KeyNotFound, MicrodbError, RejectedByCallback, TransportDown
from microdb.eventbus import CallbackSpec, EventFilter, Reject
from microdb.harness import Simulation, bundled_scenario, parse_scenario
from microdb.records import KeyRange, Op, Provenance, Record, RecordKey
from microdb.security import Grant, Interface, Role, SharingPolicy
from microdb.store import ColumnStoreConfig
from microdb.sync import DownTransport, InMemoryTransport, SyncFilter, SyncLink

SENTINEL = b"SENTINEL-7f3a9c1"


@pytest.fixture
def verdict(capsys):
    """Print one summary line per criterion, outside pytest's capture."""

    def emit(n: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, detail

    return emit


def link_both(a: Microdatabase, b: Microdatabase, link_id: str, flt: SyncFilter) -> None:
    a.sync.configure_link(SyncLink(link_id, b.replica_id, b.tier_kind, flt))
    b.sync.configure_link(SyncLink(link_id, a.replica_id, a.tier_kind, flt))


def held(db: Microdatabase, store: str) -> set[tuple[str, int]]:
    return {(r.prov.origin_id, r.prov.origin_seq) for r in db.store(store).all_records()}


# -- 1 ----------------------------------------------------------------------------


def test_01_convergence_under_outage(verdict):
    started = time.perf_counter()
    spec = parse_scenario(bundled_scenario("outage-heal"))
    sim = Simulation(spec)
    report = sim.run()
    elapsed = time.perf_counter() - started
    hashes = {rid: db.content_hash("temp").hex() for rid, db in sim.dbs.items()}
    counts = {rid: len(db.store("temp")) for rid, db in sim.dbs.items()}
    outages = sum(len(l.outages) for l in spec.links)
    quiet = report.counters["quiescent"] == 1 and not any("not quiescent" in w for w in report.warnings)
    ok = (len(hashes) == 4 and len(set(hashes.values())) == 1 and set(counts.values()) == {10_000}
          and outages == 3 and quiet and report.counters["transport_down"] > 0 and elapsed < 10.0)
    verdict(1, "convergence under outage", ok,
            f"4 replicas x 10000 records, {outages} outage windows, "
            f"{len(set(hashes.values()))} distinct hash(es), quiescent within 3 passes={quiet}, {elapsed:.2f}s")


# -- 2 ----------------------------------------------------------------------------

STORES = ["s0", "s1", "s2", "s3"]


def random_filter(rnd: random.Random) -> SyncFilter:
    stores = ("*",) if rnd.random() < 0.2 else tuple(rnd.sample(STORES, rnd.randint(1, 3)))
    rng = None
    if rnd.random() < 0.7:
        lo, hi = sorted(rnd.sample(range(0, 120), 2))
        rng = KeyRange.ts(rnd.choice([lo, None]), rnd.choice([hi, None]))
        if rng.unbounded:
            rng = None
    return SyncFilter(stores, rng)


def in_filter(flt: SyncFilter, store: str, key: RecordKey) -> bool:
    if not any(fnmatch.fnmatchcase(store, p) for p in flt.stores):
        return False
    return flt.range is None or flt.range.contains_key(key)


def test_02_filter_containment(verdict):
    rnd = random.Random(2)
    leaks = misses = shipped_total = 0
    for case in range(100):
        a, b = linked_pair(tuple(STORES), filter_stores=("*",))
        for d in (a, b):
            d.sync.links["ab"].filter = random_filter(rnd)
            for _ in range(rnd.randint(5, 40)):
                d.append(rnd.choice(STORES), rnd.randrange(120), rnd.random())
        sync(a, b)  # earlier round under another filter leaves partial, gappy holdings
        for d in (a, b):
            for _ in range(rnd.randint(0, 20)):
                d.append(rnd.choice(STORES), rnd.randrange(120), rnd.random())
        flt = random_filter(rnd)
        a.sync.links["ab"].filter = flt
        b.sync.links["ab"].filter = flt
        missing = {"out": set(), "in": set()}
        for direction, src, dst in (("out", a, b), ("in", b, a)):
            for s in STORES:
                have = held(dst, s)
                for r in src.store(s).all_records():
                    if in_filter(flt, s, r.key) and (r.prov.origin_id, r.prov.origin_seq) not in have:
                        missing[direction].add((s, r.prov.origin_id, r.prov.origin_seq))
        cap = []
        sync(a, b, capture=cap)
        shipped = {"out": set(), "in": set()}
        for direction, s, r in delta_records(cap, a):
            if s == REGISTRY_STORE:
                continue
            shipped_total += 1
            if not in_filter(flt, s, r.key):
                leaks += 1
            shipped[direction].add((s, r.prov.origin_id, r.prov.origin_seq))
        misses += sum(len(missing[d] - shipped[d]) for d in ("out", "in"))
    verdict(2, "filter containment", leaks == 0 and misses == 0,
            f"100 random filters, {shipped_total} records on the wire, {leaks} out-of-filter, "
            f"{misses} in-filter missing records not shipped")


# -- 3 ----------------------------------------------------------------------------

DATA_IFACES = [i for i in Interface if i is not Interface.ADMIN]  # the six data-plane interfaces


def test_03_policy_inheritance_matrix(verdict):
    rnd = random.Random(3)
    a, b = linked_pair(("t0", "t1", "t2", "t3"))
    stores = ["t0", "t1", "t2", "t3"]
    digest = bytes(range(32))
    a.define_policy(SharingPolicy("open", digest))
    a.define_policy(SharingPolicy("closed", digest, allow_synchronization=False))
    roles = []
    for i in range(8):
        grants = []
        for _ in range(rnd.randint(1, 4)):
            rng = None
            if rnd.random() < 0.3:
                lo = rnd.randrange(50)
                rng = KeyRange.ts(lo, lo + rnd.randint(1, 50))
            grants.append(Grant(rnd.choice(list(Interface)), rnd.choice(stores + ["*"]), rng,
                                rnd.choice([None, None, "open", "closed", "ghost"])))
        a.define_role(Role(f"role{i}", grants))
        roles.append(f"role{i}")
    principals = [f"user{i:02d}" for i in range(20)]
    for p in principals[:16]:  # four principals stay unprovisioned
        a.provision(p, rnd.sample(roles, rnd.randint(1, 3)))
    assert b.security.roles_of("user00") == ()
    sync(a, b)
    same = total = admin_same = 0
    for p, iface, s in itertools.product(principals, DATA_IFACES, stores):
        total += 1
        same += bool(a.security.authorize(p, iface, s)) == bool(b.security.authorize(p, iface, s))
    for p, s in itertools.product(principals, stores):
        admin_same += bool(a.security.authorize(p, Interface.ADMIN, s)) == \
            bool(b.security.authorize(p, Interface.ADMIN, s))
    allowed = sum(bool(a.security.authorize(p, i, s)) for p, i, s in itertools.product(principals, DATA_IFACES, stores))
    verdict(3, "policy inheritance", total == 480 and same == 480 and admin_same == 80,
            f"{same}/{total} decisions identical at origin and replica ({allowed} allows); admin column "
            f"{admin_same}/80")


# -- 4 ----------------------------------------------------------------------------


def check_events(dbs, subs) -> list[str]:
    problems = []
    for db in dbs:
        for name, st in db.stores.items():
            for txn, op in (("create", Op.CREATE), ("update", Op.UPDATE), ("delete", Op.DELETE)):
                if db.bus.emitted[(name, txn)] != st.stats.committed[op]:
                    problems.append(f"{db.replica_id}/{name}: {db.bus.emitted[(name, txn)]} {txn} events, "
                                    f"{st.stats.committed[op]} committed")
    for sub in subs:
        per_store: dict[str, list[int]] = {}
        for e in sub.drain():
            per_store.setdefault(e.store, []).append(e.event_seq)
        if sub.gap:
            problems.append(f"subscriber {sub.id} overflowed")
        for store, seqs in per_store.items():
            if any(x >= y for x, y in zip(seqs, seqs[1:])):
                problems.append(f"subscriber {sub.id}/{store}: event_seq not strictly increasing")
    return problems


def test_04_event_completeness(verdict):
    problems = []
    runs = 0
    for name in ("outage-heal", "policy-blocked", "empty"):
        sim = Simulation(parse_scenario(bundled_scenario(name)))
        subs = [db.subscribe(EventFilter("*"), capacity=1_000_000) for db in sim.dbs.values()]
        sim.run()
        problems += check_events(sim.dbs.values(), subs)
        runs += 1

    # mixed workload with rejecting callbacks on both sides of a link
    rnd = random.Random(4)
    a, b = linked_pair(("m", "i"), mutable=False)
    for d in (a, b):
        d.drop_store("m")
        d.create_store(ColumnStoreConfig("m", "mutable"))
        d.register_callback(CallbackSpec("odd", "exchange", lambda r: Reject("odd") if r.value % 2 else None))
    link_both(a, b, "ab2", SyncFilter(("m", "i")))
    subs = [d.subscribe(EventFilter("*"), capacity=100_000) for d in (a, b)]
    rejected = emitted_on_reject = 0
    for _ in range(600):
        d = rnd.choice((a, b))
        before = sum(d.bus.emitted.values())
        try:
            roll = rnd.random()
            live = d.read_range("m")
            if roll < 0.5 or not live:
                d.append(rnd.choice(("m", "i")), rnd.randrange(30), rnd.randrange(100))
            elif roll < 0.75:
                d.mutate("m", rnd.choice(live).key, rnd.randrange(100))
            elif roll < 0.85:
                d.delete("m", rnd.choice(live).key)
            else:
                sync(a, b, link="ab2")
        except RejectedByCallback:
            rejected += 1
            emitted_on_reject += sum(d.bus.emitted.values()) - before
    quiesce(a, b, link="ab2")
    problems += check_events((a, b), subs)
    runs += 1
    if emitted_on_reject:
        problems.append(f"{emitted_on_reject} events from rejected writes")
    verdict(4, "event completeness", not problems and rejected > 0,
            f"{runs} runs, {rejected} rejected writes emitted {emitted_on_reject} events; "
            + ("; ".join(problems[:3]) or "counts equal and sequences strictly increasing"))


# -- 5 ----------------------------------------------------------------------------


def test_05_immutability(verdict):
    rnd = random.Random(5)
    violations = attempts = 0
    for _ in range(1000):
        d = make_db("x", "local")
        d.create_store(ColumnStoreConfig("imm"))
        keys = []
        for _ in range(rnd.randint(1, 12)):
            kind = rnd.random()
            if kind < 0.45 or not keys:
                keys.append(d.append("imm", rnd.randrange(10), rnd.random()).key)
            elif kind < 0.6:
                d.apply_replicated("imm", Record(RecordKey(rnd.randrange(10), rnd.randrange(3)), rnd.random(),
                                                 Provenance("peer", len(held(d, "imm")) + 1, rnd.randrange(99))))
            else:
                key = rnd.choice(keys) if rnd.random() < 0.8 else RecordKey(99, 9)
                before = d.content_hash("imm")
                attempts += 1
                try:
                    if kind < 0.8:
                        d.mutate("imm", key, "changed")
                    else:
                        d.delete("imm", key)
                    violations += 1
                except (ImmutableStore, KeyNotFound):
                    pass
                if d.content_hash("imm") != before:
                    violations += 1
    verdict(5, "immutability", violations == 0 and attempts > 1000,
            f"1000 interleavings, {attempts} mutate/delete attempts, {violations} accepted or hash-changing")


# -- 6 ----------------------------------------------------------------------------


def crash_fixture():
    a, b = linked_pair(("temp", "flow"))
    for i in range(1500):
        a.append("temp", i, float(i))
    for i in range(40):
        b.append("temp", 10_000 + i, -float(i))
        b.append("flow", i, i)
    a.append("flow", 500, "a-side")
    return a, b


def final_hashes(*dbs) -> list[dict]:
    return [{s: d.content_hash(s).hex() for s in ("temp", "flow", REGISTRY_STORE)} for d in dbs]


def test_06_idempotent_sync_under_interruption(verdict):
    a, b = crash_fixture()
    cap = []
    sync(a, b, capture=cap)
    quiesce(a, b)
    reference = final_hashes(a, b)
    boundaries = len(cap)
    mismatched = []
    for n in range(boundaries):
        a, b = crash_fixture()
        with pytest.raises(TransportDown):
            sync(a, b, fail_after=n)
        quiesce(a, b)
        if final_hashes(a, b) != reference:
            mismatched.append(n)
    verdict(6, "idempotent sync under interruption", not mismatched and boundaries > 4,
            f"crash after each of {boundaries} frame boundaries; mismatches at {mismatched or 'none'}")


# -- 7 ----------------------------------------------------------------------------

M_A = {"manifest_id": "site-a", "version": 1,
       "policies": [{"name": "open", "eula_text": "share"}],
       "roles": [{"name": "reader", "grants": [{"interface": "exchange-read", "store": "flow"}]}],
       "bindings": {"alice": ["reader"]},
       "stores": [{"name": "flow", "sharing_policy": "open"}],
       "ingest": [{"source_id": "meter", "store": "flow", "mode": "push"}]}
M_B = {"manifest_id": "site-b", "version": 1,
       "model": {"model_id": "m", "types": [{"name": "Pump", "properties": [{"name": "rpm", "kind": "float"}]}],
                 "instances": [{"name": "p1", "type": "Pump", "store": "pres"}]},
       "stores": [{"name": "pres", "mutability": "mutable", "value_type": "m:Pump"}],
       "callbacks": [{"id": "clamp", "stage": "ingest", "builtin": "range_clamp", "params": {"min": 0},
                      "store": "pres"}]}


def test_07_registry_replay(verdict):
    a, b = make_db("a", "local"), make_db("b", "regional")
    link_both(a, b, "ab", SyncFilter(("*",)))
    for d, m in ((a, M_A), (b, M_B)):
        with pytest.raises(TransportDown):
            d.sync.reconcile_registry("ab", DownTransport())
        d.registry.publish(m)
    a.sync.reconcile_registry("ab", InMemoryTransport(b.sync))
    logs = [[e.line() for e in d.registry.log()] for d in (a, b)]
    both = logs[0] == logs[1] and {e.manifest.manifest_id for e in a.registry.log()} == {"site-a", "site-b"}

    # fresh instances on other tiers learn the union by replay, then deploy it in log order
    c, d = make_db("c", "device"), make_db("d", "global")
    link_both(a, c, "ac", SyncFilter(("*",)))
    link_both(b, d, "bd", SyncFilter(("*",)))
    a.sync.reconcile_registry("ac", InMemoryTransport(c.sync))
    b.sync.reconcile_registry("bd", InMemoryTransport(d.sync))
    for fresh in (c, d):
        for e in fresh.registry.log():
            fresh.registry.deploy(e.manifest.manifest_id, e.manifest.version)
    dc, dd = c.config_dump(include_links=False), d.config_dump(include_links=False)
    ok = both and dc == dd and len(dc["stores"]) == 2
    verdict(7, "registry replay", ok,
            f"both logs hold {len(logs[0])} entries ({'identical' if logs[0] == logs[1] else 'differ'}); "
            f"fresh-instance config dumps {'identical' if dc == dd else 'differ'}")


# -- 8 ----------------------------------------------------------------------------


def test_08_encryption_at_rest_and_in_transfer(verdict, tmp_path):
    clock = Clock()
    a = Microdatabase("a", "local", tmp_path / "a", clock=clock, owner_key=OWNER_KEY)
    b = Microdatabase("b", "regional", tmp_path / "b", clock=clock, owner_key=OWNER_KEY)
    for d in (a, b):
        d.create_store(ColumnStoreConfig("vault", encrypted=True))
    link_both(a, b, "ab", SyncFilter(("vault",)))
    a.append("vault", 1, SENTINEL)
    a.append("vault", 2, SENTINEL.decode())
    a.append("vault", 3, {"secret": SENTINEL, "n": 1})
    b.append("vault", 4, SENTINEL)
    cap = []
    sync(a, b, capture=cap)
    a.close()
    b.close()
    needles = (SENTINEL, SENTINEL.hex().encode())
    files = [p for p in tmp_path.rglob("*") if p.is_file()]
    disk_hits = sum(n in p.read_bytes() for p in files for n in needles)
    wire_hits = sum(n in raw for _, raw in cap for n in needles)

    # replay the captured round into a fresh peer, corrupting one byte of one sealed frame at a time
    out_frames = [raw for d, raw in cap if d == "out"]
    accepted = tried = 0
    for idx in range(1, len(out_frames)):  # frame 0 is the cleartext HELLO
        for pos in range(len(out_frames[idx])):
            peer = Microdatabase("b", "regional", clock=Clock(), owner_key=OWNER_KEY)
            peer.create_store(ColumnStoreConfig("vault"))
            peer.sync.configure_link(SyncLink("ab", "a", "local", SyncFilter(("vault",))))
            for earlier in out_frames[:idx]:
                peer.sync.handle(earlier)
            before = peer.content_hash("vault")
            bad = bytearray(out_frames[idx])
            bad[pos] ^= 0x01
            tried += 1
            try:
                peer.sync.handle(bytes(bad))
                accepted += 1
            except MicrodbError:
                if peer.content_hash("vault") != before:
                    accepted += 1
    b2 = Microdatabase("b", "regional", tmp_path / "b", clock=clock, owner_key=OWNER_KEY)
    readable = len(b2.read_range("vault")) == 4
    ok = disk_hits == 0 and wire_hits == 0 and accepted == 0 and tried > 0 and readable
    verdict(8, "encryption at rest and in transfer", ok,
            f"{len(files)} files and {len(cap)} frames scanned, {disk_hits + wire_hits} sentinel hits; "
            f"{tried} single-byte tampers, {accepted} accepted")


# -- 9 ----------------------------------------------------------------------------


def test_09_determinism(verdict, tmp_path, capsys):
    identical = []
    for name in ("outage-heal", "policy-blocked"):
        blobs = []
        for i in range(2):
            out = tmp_path / f"{name}-{i}.json"
            cli.main(["sim", "run", name, "--seed", "11", "--out", str(out)])
            blobs.append(out.read_bytes())
        identical.append(blobs[0] == blobs[1] and len(blobs[0]) > 0)
    capsys.readouterr()
    verdict(9, "determinism", all(identical), f"byte-identical reports for 2 scenarios: {identical}")


# -- 10 ---------------------------------------------------------------------------

WTS = [99, 100, 101]
ORIGINS = ["o1", "o2", "o3"]


def chain3(mutable: bool, clock: Clock):
    dbs = [make_db(o, t, clock) for o, t in zip(ORIGINS, ("device", "local", "regional"))]
    for d in dbs:
        d.create_store(ColumnStoreConfig("s", "mutable" if mutable else "immutable"))
    link_both(dbs[0], dbs[1], "l01", SyncFilter(("s",)))
    link_both(dbs[1], dbs[2], "l12", SyncFilter(("s",)))
    return dbs


def settle(dbs) -> None:
    for _ in range(6):
        moved = dbs[0].sync.sync_round("l01", InMemoryTransport(dbs[1].sync)).exchanged
        moved += dbs[1].sync.sync_round("l12", InMemoryTransport(dbs[2].sync)).exchanged
        if moved == 0:
            return
    raise AssertionError("chain did not settle")


def compare(dbs, before) -> int:
    want = oracles.union_visible(*before)
    bad = 0
    for d in dbs:
        got = {(r.key.ts, r.key.seq): (r.value, r.prov.origin_id, r.prov.origin_seq, r.prov.write_ts)
               for r in d.store("s").visible_records()}
        bad += got != want
    return bad


def test_10_oracle_equivalence(verdict):
    # every key is one point of the domain: each origin either skips it or writes it at one of 3 write_ts
    domain = list(itertools.product([None] + WTS, repeat=3))
    mismatches = cases = 0
    for mutable in (False, True):
        clock = Clock(start=0, step=0)
        dbs = chain3(mutable, clock)
        for ts, choice in enumerate(domain):
            for d, wts in zip(dbs, choice):
                if wts is not None:
                    clock.now = wts
                    d.append("s", ts, f"{d.replica_id}@{wts}")
        before = [list(d.store("s").all_records()) for d in dbs]
        settle(dbs)
        mismatches += compare(dbs, before)
        cases += len(domain)

    # random larger replicas up to 1000 records in total
    rnd = random.Random(10)
    sizes = []
    for trial in range(10):
        clock = Clock(start=0, step=0)
        dbs = chain3(trial % 2 == 1, clock)
        n = rnd.randint(100, 1000)
        sizes.append(n)
        for _ in range(n):
            d = rnd.choice(dbs)
            clock.now = rnd.choice(WTS)
            d.append("s", rnd.randrange(200), rnd.random())
        before = [list(d.store("s").all_records()) for d in dbs]
        settle(dbs)
        mismatches += compare(dbs, before)
    verdict(10, "oracle equivalence", mismatches == 0,
            f"{cases} exhaustive 3-origin x 3-write_ts keys (mutable and immutable) and 10 random replicas "
            f"of {min(sizes)}-{max(sizes)} records; {mismatches} replica(s) differ from the union oracle")
