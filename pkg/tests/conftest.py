from __future__ import annotations

import itertools
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from microdb.engine import Microdatabase  # noqa: E402
from microdb.security import XorMacProvider  # noqa: E402
from microdb.store import ColumnStoreConfig  # noqa: E402
from microdb.sync import InMemoryTransport, SyncFilter, SyncLink  # noqa: E402

OWNER_KEY = bytes(range(32))


class Clock:
    """Manual nanosecond clock; each read advances by ``step`` so write_ts values stay distinct."""

    def __init__(self, start: int = 1_000_000_000, step: int = 1):
        self.now = start
        self.step = step

    def __call__(self) -> int:
        t = self.now
        self.now += self.step
        return t


@pytest.fixture
def clock():
    return Clock()


@pytest.fixture
def db(clock):
    d = Microdatabase("r1", "local", clock=clock, owner_key=OWNER_KEY)
    yield d
    d.close()


@pytest.fixture
def disk_db(tmp_path, clock):
    d = Microdatabase("r1", "local", tmp_path, clock=clock, owner_key=OWNER_KEY)
    yield d
    d.close()


def make_db(rid: str, tier: str, clock=None, **kw) -> Microdatabase:
    return Microdatabase(rid, tier, clock=clock or Clock(), owner_key=OWNER_KEY, crypto=XorMacProvider(), **kw)


_link_ids = itertools.count(1)


def linked_pair(stores=("temp",), mutable=False, filter_stores=None, clock=None, tiers=("local", "regional"),
                ids=("a", "b"), rng=None):
    """Two replicas in adjacent tiers with the given stores and one link configured on both ends."""
    clock = clock or Clock()
    a = make_db(ids[0], tiers[0], clock)
    b = make_db(ids[1], tiers[1], clock)
    for s in stores:
        cfg = ColumnStoreConfig(s, "mutable" if mutable else "immutable")
        a.create_store(cfg)
        b.create_store(cfg)
    flt = SyncFilter(tuple(filter_stores if filter_stores is not None else stores), rng)
    a.sync.configure_link(SyncLink("ab", b.replica_id, b.tier_kind, flt))
    b.sync.configure_link(SyncLink("ab", a.replica_id, a.tier_kind, flt))
    return a, b


def sync(a: Microdatabase, b: Microdatabase, link: str = "ab", capture=None, fail_after=None):
    return a.sync.sync_round(link, InMemoryTransport(b.sync, capture=capture, fail_after=fail_after))


def delta_records(capture, db: Microdatabase, link: str = "ab"):
    """Open every captured DELTA frame with the link key and list ``(direction, store, record)``."""
    from microdb import codec
    from microdb.sync import DELTA, iter_frames

    key = db.sync.key_for(db.sync.link(link))
    out = []
    for direction, raw in capture:
        for ftype, version, payload in iter_frames(raw):
            if ftype != DELTA:
                continue
            r = codec.Reader(db.crypto.open(key, payload, bytes((ftype, version))))
            store = r.str()
            r.u8()
            for _ in range(r.u32()):
                out.append((direction, store, codec.read_record(r)))
    return out


def quiesce(a: Microdatabase, b: Microdatabase, link: str = "ab", limit: int = 5) -> int:
    """Run rounds until one exchanges nothing; return the number of rounds used."""
    for n in range(1, limit + 1):
        if sync(a, b, link).exchanged == 0:
            return n
    raise AssertionError(f"no quiescence within {limit} rounds")
