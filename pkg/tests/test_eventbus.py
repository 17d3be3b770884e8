from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import linked_pair, make_db, sync
from microdb import codec
from microdb.errors import KeyMutation, RejectedByCallback, Unauthorized, UnknownSubscription
from microdb.eventbus import (
    CallbackRegistry,
    CallbackSpec,
    Event,
    EventBus,
    EventFilter,
    Reject,
    builtin_spec,
    range_clamp,
    redact,
    reject_all,
    unit_scale,
)
from microdb.records import KeyRange, Provenance, Record, RecordKey
from microdb.security import Grant, Interface, Principal, Role
from microdb.store import ColumnStoreConfig


def rec(value, ts=1):
    return Record(RecordKey(ts), value, Provenance("o", 1, 1))


def test_one_event_per_append(db):
    db.create_store(ColumnStoreConfig("temp"))
    sub = db.subscribe(EventFilter("temp", {"create"}))
    r = db.append("temp", 5, 1.0)
    [ev] = sub.drain()
    assert (ev.txn, ev.store, ev.key, ev.actor) == ("create", "temp", r.key, "__system__")
    assert ev.event_seq == r.event_seq


def test_unsubscribe_stops_delivery(db):
    db.create_store(ColumnStoreConfig("temp"))
    sub = db.subscribe(EventFilter("temp"))
    db.unsubscribe(sub.id)
    db.append("temp", 1, 1)
    assert sub.drain() == []
    with pytest.raises(UnknownSubscription):
        db.unsubscribe(sub.id)


def test_two_subscribers_see_commit_order(db):
    db.create_store(ColumnStoreConfig("temp"))
    s1 = db.subscribe(EventFilter("temp"))
    s2 = db.subscribe(EventFilter("temp"))
    seqs = [db.append("temp", random.Random(i).randrange(50), i).event_seq for i in range(100)]
    assert [e.event_seq for e in s1.drain()] == seqs == [e.event_seq for e in s2.drain()]
    assert seqs == list(range(2, 102))  # create-store took event_seq 1


def test_subscribe_needs_grant(db):
    db.create_store(ColumnStoreConfig("temp"))
    with pytest.raises(Unauthorized):
        db.subscribe(EventFilter("temp"), Principal("eve"))
    db.define_role(Role("watch", [Grant(Interface.SUBSCRIBE, "temp")]))
    db.provision("eve", "watch")
    db.subscribe(EventFilter("temp"), Principal("eve"))
    with pytest.raises(Unauthorized):
        db.subscribe(EventFilter("*"), Principal("eve"))


def test_other_subject_cannot_unsubscribe(db):
    db.define_role(Role("watch", [Grant(Interface.SUBSCRIBE, "*")]))
    db.provision("eve", "watch")
    db.provision("bob", "watch")
    sub = db.subscribe(EventFilter("*"), Principal("eve"))
    with pytest.raises(Unauthorized):
        db.unsubscribe(sub.id, Principal("bob"))


def test_rejected_append_emits_nothing(db):
    db.create_store(ColumnStoreConfig("temp"))
    db.register_callback(CallbackSpec("no", "exchange", reject_all("nope"), "temp"))
    sub = db.subscribe(EventFilter("temp"))
    with pytest.raises(RejectedByCallback):
        db.append("temp", 1, 1.0)
    assert sub.drain() == []
    assert len(db.store("temp")) == 0


def test_replicated_record_event_actor_names_origin():
    a, b = linked_pair(("temp",))
    sub = b.subscribe(EventFilter("temp"))
    a.append("temp", 1, 1.0)
    sync(a, b)
    [ev] = sub.drain()
    assert ev.txn == "create" and ev.actor == "sync:a"


def test_bounded_queue_drops_oldest_and_flags_gap():
    bus = EventBus(lambda: 0)
    sub = bus.subscribe(EventFilter("s"), "x", capacity=4)
    for i in range(6):
        bus.emit("create", "s", RecordKey(i), "w")
    got = sub.drain()
    assert sub.gap and sub.dropped == 2
    assert [e.event_seq for e in got] == [3, 4, 5, 6]


def test_transforms_compose_in_registration_order(db):
    db.create_store(ColumnStoreConfig("temp"))
    db.register_callback(CallbackSpec("double", "exchange", unit_scale(2), "temp"))
    db.register_callback(CallbackSpec("inc", "exchange", unit_scale(1, 1), "temp"))
    db.append("temp", 1, 5)
    # 5*2+1 = 11; the other order would give (5+1)*2 = 12
    assert db.read_range("temp")[0].value == 11


def test_no_callbacks_is_identity():
    r = rec({"a": 1})
    assert CallbackRegistry().run_chain("exchange", "s", r).record is r


def test_first_reject_short_circuits():
    reg = CallbackRegistry()
    called = []
    reg.register(CallbackSpec("a", "ingest", reject_all("first")))
    reg.register(CallbackSpec("b", "ingest", lambda r: called.append(r)))
    res = reg.run_chain("ingest", "s", rec(1))
    assert not res.accepted and res.rejected_by == "a" and res.reason == "first"
    assert called == []


def test_key_change_is_key_mutation():
    reg = CallbackRegistry()
    reg.register(CallbackSpec("k", "exchange", lambda r: Record(RecordKey(99), r.value, r.prov)))
    with pytest.raises(KeyMutation):
        reg.run_chain("exchange", "s", rec(1))


def test_role_filtered_callback():
    reg = CallbackRegistry()
    reg.register(CallbackSpec("ops", "exchange", unit_scale(10), role="ops-*"))
    assert reg.run_chain("exchange", "s", rec(1), ["viewer"]).record.value == 1
    assert reg.run_chain("exchange", "s", rec(1), ["ops-east"]).record.value == 10


def test_stage_and_store_filters():
    reg = CallbackRegistry()
    reg.register(CallbackSpec("x", "ingest", unit_scale(3), store="t*"))
    assert reg.run_chain("ingest", "temp", rec(1)).record.value == 3
    assert reg.run_chain("ingest", "pres", rec(1)).record.value == 1
    assert reg.run_chain("exchange", "temp", rec(1)).record.value == 1


def test_builtins():
    assert range_clamp(0, 10)(rec(12)).value == 10
    assert isinstance(range_clamp(0, 10)(rec(float("nan"))), Reject)
    assert isinstance(range_clamp(0, 10, mode="reject")(rec(-1)), Reject)
    assert range_clamp(0, 10, field="t")(rec({"t": -3, "u": 50})).value == {"t": 0, "u": 50}
    assert redact(["pw"])(rec({"pw": "x", "v": 1})).value == {"v": 1}
    spec = builtin_spec({"id": "c", "stage": "ingest", "builtin": "unit_scale", "params": {"factor": 3}})
    assert spec.action(rec(2)).value == 6


def test_reject_all_at_sync_in_acknowledges_without_commit():
    a, b = linked_pair(("temp", "keep"))
    b.register_callback(CallbackSpec("drop", "sync-in", reject_all(), "temp"))
    for i in range(5):
        a.append("temp", i, i)
        a.append("keep", i, i)
    rep = sync(a, b)
    assert rep.sent["temp"] == 5
    assert b.store("temp").has("a", 5)
    assert b.read_range("temp") == []
    assert a.content_hash("keep") == b.content_hash("keep")
    # acknowledged: a second round ships nothing for the rejected store
    rep2 = sync(a, b)
    assert sum(rep2.sent.values()) == 0


def test_exactly_one_event_per_commit(db):
    db.create_store(ColumnStoreConfig("m", "mutable"))
    db.register_callback(CallbackSpec("odd", "exchange", lambda r: Reject("odd") if r.value % 2 else None, "m"))
    rnd = random.Random(1)
    for i in range(200):
        try:
            if rnd.random() < 0.7 or not db.read_range("m"):
                db.append("m", rnd.randrange(20), rnd.randrange(100))
            else:
                k = rnd.choice(db.read_range("m")).key
                if rnd.random() < 0.5:
                    db.mutate("m", k, rnd.randrange(100))
                else:
                    db.delete("m", k)
        except RejectedByCallback:
            pass
    stats = db.store("m").stats.committed
    for txn, op in (("create", 1), ("update", 2), ("delete", 3)):
        assert db.bus.emitted[("m", txn)] == stats[op]


@given(st.lists(st.tuples(st.sampled_from(["a", "b"]), st.integers(0, 9)), max_size=60))
@settings(max_examples=40, deadline=None)
def test_per_store_event_seq_strictly_increasing(writes):
    d = make_db("x", "local")
    d.create_store(ColumnStoreConfig("a"))
    d.create_store(ColumnStoreConfig("b"))
    sub = d.subscribe(EventFilter("*"))
    for s, ts in writes:
        d.append(s, ts, ts)
    by_store: dict[str, list[int]] = {}
    for e in sub.drain():
        by_store.setdefault(e.store, []).append(e.event_seq)
    for seqs in by_store.values():
        # event_seq 1 of each store went to its create-store event
        assert seqs == list(range(2, len(seqs) + 2))


def test_events_carry_no_value_bytes(db):
    db.create_store(ColumnStoreConfig("temp"))
    sub = db.subscribe(EventFilter("temp"))
    marker = "VALUE-MARKER-91"
    db.append("temp", 1, marker)
    db.append("temp", 2, {"f": marker.encode()})
    for ev in sub.drain():
        blob = ev.encode()
        assert marker.encode() not in blob
        assert codec.encode_value(marker) not in blob
        assert set(ev.to_json()) == {"event_seq", "txn", "store", "key", "actor", "emit_ts"}


def test_range_filtered_subscription(db):
    db.create_store(ColumnStoreConfig("temp"))
    sub = db.subscribe(EventFilter("temp", range=KeyRange.ts(10, 20)))
    for ts in (5, 10, 19, 20):
        db.append("temp", ts, ts)
    assert [e.key.ts for e in sub.drain()] == [10, 19]


def test_event_line_format():
    ev = Event(3, "create", "temp", RecordKey(100, 1), "alice", 0)
    assert ev.line() == "3\tcreate\ttemp\t100,1\talice"


def test_chain_is_deterministic():
    def run():
        reg = CallbackRegistry()
        reg.register(CallbackSpec("a", "exchange", unit_scale(1.5, 2)))
        reg.register(CallbackSpec("b", "exchange", range_clamp(0, 100)))
        return [reg.run_chain("exchange", "s", rec(v)).record for v in (-10, 3, 90)]

    assert run() == run()


def test_reads_do_not_emit(db):
    db.create_store(ColumnStoreConfig("temp"))
    db.append("temp", 1, 1)
    sub = db.subscribe(EventFilter("*"))
    db.read_range("temp")
    db.store("temp").get(RecordKey(1))
    assert sub.drain() == []
