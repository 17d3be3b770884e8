from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import Clock, make_db
from microdb.errors import AlreadyBound, InvalidConfig, UnknownStore
from microdb.eventbus import CallbackSpec, EventFilter, range_clamp
from microdb.ingest import Dropped, IngestBinding, ScriptedSource, parse_literal
from microdb.store import ColumnStoreConfig

MS = 1_000_000


def ingest_db(mode="push", period_ms=None, address="", mutable=False, clock=None):
    d = make_db("r", "local", clock or Clock(start=0, step=0))
    d.create_store(ColumnStoreConfig("temp", "mutable" if mutable else "immutable"))
    d.ingest.bind(IngestBinding("src", "temp", mode, period_ms, address))
    return d


def test_bind_poll_shows_active_status():
    d = ingest_db("poll", 1000, "mem:a")
    [row] = d.ingest.status()
    assert row == {"source_id": "src", "store": "temp", "mode": "poll",
                   "appended": 0, "dropped": 0, "duplicate": 0, "unreachable": 0}


def test_second_bind_is_already_bound():
    d = ingest_db()
    with pytest.raises(AlreadyBound):
        d.ingest.bind(IngestBinding("other", "temp"))


def test_bind_unknown_store():
    d = make_db("r", "local")
    with pytest.raises(UnknownStore):
        d.ingest.bind(IngestBinding("s", "nope"))


@pytest.mark.parametrize("b", [IngestBinding("s", "temp", "poll", 5), IngestBinding("s", "temp", "stream")])
def test_bad_bindings(b):
    d = make_db("r", "local")
    d.create_store(ColumnStoreConfig("temp"))
    with pytest.raises(InvalidConfig):
        d.ingest.bind(b)


def test_unbind_then_push_is_dropped_and_counted():
    d = ingest_db()
    d.ingest.unbind("temp")
    assert d.ingest.on_push("src", (1, 1.0)) == Dropped("unbound")
    assert d.ingest.dropped_unbound == 1
    assert d.read_range("temp") == []


def test_duplicate_push_stores_one_record():
    d = ingest_db()
    d.ingest.on_push("src", (5, 1.0))
    assert d.ingest.on_push("src", (5, 1.0)) == Dropped("duplicate")
    assert len(d.read_range("temp")) == 1
    assert d.ingest.status()[0]["duplicate"] == 1


def test_conflicting_duplicate_on_immutable_is_dropped():
    d = ingest_db()
    d.ingest.on_push("src", (5, 1.0))
    assert d.ingest.on_push("src", (5, 2.0)) == Dropped("conflict")
    assert d.read_range("temp")[0].value == 1.0


def test_changed_reading_updates_mutable_store():
    d = ingest_db(mutable=True)
    d.ingest.on_push("src", (5, 1.0))
    d.ingest.on_push("src", (5, 2.0))
    assert [r.value for r in d.read_range("temp")] == [2.0]


def test_nan_rejected_by_clamp_callback():
    d = ingest_db()
    d.register_callback(CallbackSpec("clamp", "ingest", range_clamp(-50, 150), "temp"))
    assert d.ingest.on_push("src", (1, float("nan"))) == Dropped("rejected-by-callback")
    assert d.ingest.on_push("src", (2, 500.0)).key.ts == 2
    assert d.read_range("temp")[0].value == 150.0


def test_hundred_pushes_give_hundred_events():
    d = ingest_db()
    sub = d.subscribe(EventFilter("temp", {"create"}))
    for i in range(100):
        d.ingest.on_push("src", (i, float(i)))
    evs = sub.drain()
    assert len(evs) == 100 == len(d.read_range("temp"))
    assert {e.actor for e in evs} == {"ingest:src"}


def test_dict_reading_mapping():
    d = make_db("r", "local")
    d.create_store(ColumnStoreConfig("temp"))
    d.ingest.bind(IngestBinding("src", "temp", ts_field="t", value_field="v"))
    d.ingest.on_push("src", {"t": 7, "v": "x"})
    assert d.ingest.on_push("src", {"nope": 1}) == Dropped("malformed")
    assert [(r.key.ts, r.value) for r in d.read_range("temp")] == [(7, "x")]


def test_poll_empty_source_advances_deadline():
    clock = Clock(start=0, step=0)
    d = ingest_db("poll", 100, "mem:a", clock=clock)
    d.ingest.resolver.register("mem:a", ScriptedSource([]))
    assert d.ingest.next_due() == 100 * MS
    clock.now = 100 * MS
    assert d.ingest.poll_tick(clock.now) == 0
    assert d.ingest.next_due() == 200 * MS


def test_poll_appends_new_readings_in_ts_order():
    clock = Clock(start=0, step=0)
    d = ingest_db("poll", 100, "mem:a", clock=clock)
    d.ingest.resolver.register("mem:a", ScriptedSource([(30 * MS, 3), (10 * MS, 1), (20 * MS, 2)]))
    sub = d.subscribe(EventFilter("temp"))
    clock.now = 100 * MS
    assert d.ingest.poll_tick(clock.now) == 3
    assert [e.key.ts for e in sub.drain()] == [10 * MS, 20 * MS, 30 * MS]


def test_poll_not_due_does_nothing():
    clock = Clock(start=0, step=0)
    d = ingest_db("poll", 100, "mem:a", clock=clock)
    d.ingest.resolver.register("mem:a", ScriptedSource([(1, 1)]))
    assert d.ingest.poll_tick(50 * MS) == 0


def test_outage_backlog_appended_on_recovery():
    clock = Clock(start=0, step=0)
    d = ingest_db("poll", 100, "mem:a", clock=clock)
    readings = [(t * MS, t) for t in range(5, 300, 10)]
    d.ingest.resolver.register("mem:a", ScriptedSource(readings, outages=[(100 * MS, 300 * MS)]))
    counts = []
    for tick in (100, 200, 300):
        clock.now = tick * MS
        counts.append(d.ingest.poll_tick(clock.now))
    assert counts == [0, 0, len(readings)]
    assert d.ingest.status()[0]["unreachable"] == 2
    assert [(r.key.ts, r.value) for r in d.read_range("temp")] == readings


def test_disabled_grant_drops_pushes_as_unauthorized():
    d = ingest_db()
    d.ingest.disable_grant("temp")
    assert d.ingest.on_push("src", (1, 1.0)) == Dropped("unauthorized")
    d.ingest.enable_grant("temp")
    assert not isinstance(d.ingest.on_push("src", (1, 1.0)), Dropped)


def test_scripted_source_file(tmp_path):
    p = tmp_path / "src.tsv"
    p.write_text("# comment\n1\t2.5\n\n2\ttrue\n3\t\"hi\"\n4\t{\"a\": 1}\n5\tnan\n")
    src = ScriptedSource.from_file(p)
    vals = [v for _, v in src.fetch(None, 10)]
    assert vals[:4] == [2.5, True, "hi", {"a": 1}] and math.isnan(vals[4])
    assert parse_literal("bare words") == "bare words"


def test_file_address_resolves(tmp_path):
    p = tmp_path / "src.tsv"
    p.write_text("1\t1\n2\t2\n")
    clock = Clock(start=0, step=0)
    d = ingest_db("poll", 10, f"file:{p}", clock=clock)
    clock.now = 10 * MS
    assert d.ingest.poll_tick(clock.now) == 2


@given(
    st.lists(st.integers(1, 2000), unique=True, max_size=50),
    st.lists(st.tuples(st.integers(0, 2000), st.integers(1, 500)), max_size=4),
)
@settings(max_examples=40, deadline=None)
def test_poll_loses_no_reading_under_any_outage_schedule(tss, windows):
    clock = Clock(start=0, step=0)
    d = ingest_db("poll", 50, "mem:a", clock=clock)
    readings = [(t * MS, t) for t in tss]
    outages = [(a * MS, (a + n) * MS) for a, n in windows]
    d.ingest.resolver.register("mem:a", ScriptedSource(readings, outages))
    last_seen = []
    t = 0
    # run until every outage is over and one clean tick has happened past the last reading
    horizon = max([2000] + [a + n for a, n in windows]) + 100
    while t <= horizon * MS:
        t += 50 * MS
        clock.now = t
        d.ingest.poll_tick(t)
        if d.ingest.last_seen["temp"] is not None:
            last_seen.append(d.ingest.last_seen["temp"])
    assert {(r.key.ts, r.value) for r in d.read_range("temp")} == set(readings)
    assert last_seen == sorted(last_seen)


def test_poll_never_reappends_seen_ts():
    clock = Clock(start=0, step=0)
    d = ingest_db("poll", 10, "mem:a", clock=clock)

    class Replaying:
        def fetch(self, since, now):
            # ignores since_ts on purpose; the binding must filter
            return [(1, 1), (2, 2)]

    d.ingest.resolver.register("mem:a", Replaying())
    for tick in (10, 20, 30):
        clock.now = tick * MS
        d.ingest.poll_tick(clock.now)
    assert len(d.read_range("temp")) == 2
    assert d.ingest.status()[0]["duplicate"] == 0


def test_bindings_survive_restart(tmp_path):
    clock = Clock(start=0, step=0)
    from microdb.engine import Microdatabase

    d = Microdatabase("r", "local", tmp_path, clock=clock)
    d.create_store(ColumnStoreConfig("temp"))
    d.ingest.bind(IngestBinding("src", "temp", "poll", 10, "mem:a"))
    d.ingest.resolver.register("mem:a", ScriptedSource([(1, 1)]))
    clock.now = 10 * MS
    d.ingest.poll_tick(clock.now)
    d.close()
    d2 = Microdatabase("r", "local", tmp_path, clock=clock)
    assert d2.ingest.bindings["temp"].address == "mem:a"
    assert d2.ingest.last_seen["temp"] == 1
