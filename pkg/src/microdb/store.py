"""Append-mostly column store.

Each store is one append-only log of frames plus in-memory indexes that are
rebuilt on open::

    frame = u32 payload length | u8 kind (0x01 record, 0x02 tombstone) | payload

The payload is the canonical record encoding (see :mod:`microdb.codec`), or
that encoding sealed under the store's data key when the store is encrypted.

Every version of every key is kept: the visible record for a key is the
version with the greatest ``(write_ts, origin_id, origin_seq)``. Local and
replicated records share one indexing path so that replaying the log, or
receiving the same records from a peer in any order, gives the same state.
"""

from __future__ import annotations

import bisect
import hashlib
import logging
import os
import re
import struct
import threading
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Optional

from . import codec
from .errors import DecodeError, ImmutableStore, InvalidConfig, KeyNotFound
from .records import KeyRange, Op, Provenance, Record, RecordKey

logger = logging.getLogger(__name__)

STORE_NAME_RE = re.compile(r"^[a-z0-9_-]{1,64}$")
RESERVED_PREFIX = "__"

FRAME_RECORD = 0x01
FRAME_TOMBSTONE = 0x02
_FRAME_HEAD = struct.Struct(">IB")


class Mutability(str, Enum):
    IMMUTABLE = "immutable"
    MUTABLE = "mutable"


@dataclass(frozen=True)
class ColumnStoreConfig:
    name: str
    mutability: Mutability = Mutability.IMMUTABLE
    value_type: Optional[str] = None
    encrypted: bool = False
    retention: Optional[int] = None
    sharing_policy: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "mutability", Mutability(self.mutability))

    def validate(self, allow_reserved: bool = False) -> None:
        if not STORE_NAME_RE.match(self.name) and not (
            allow_reserved and self.name.startswith(RESERVED_PREFIX)
        ):
            raise InvalidConfig(f"bad store name {self.name!r}: must match [a-z0-9_-]{{1,64}}")
        if self.retention is not None and self.retention < 1:
            raise InvalidConfig(f"retention must be >= 1, got {self.retention}")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "mutability": self.mutability.value,
            "value_type": self.value_type,
            "encrypted": self.encrypted,
            "retention": self.retention,
            "sharing_policy": self.sharing_policy,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ColumnStoreConfig":
        unknown = set(data) - {"name", "mutability", "value_type", "encrypted", "retention", "sharing_policy"}
        if unknown:
            raise InvalidConfig(f"unknown store config fields: {sorted(unknown)}")
        try:
            return cls(
                name=data["name"],
                mutability=Mutability(data.get("mutability", "immutable")),
                value_type=data.get("value_type"),
                encrypted=bool(data.get("encrypted", False)),
                retention=data.get("retention"),
                sharing_policy=data.get("sharing_policy"),
            )
        except (KeyError, ValueError) as exc:
            raise InvalidConfig(f"bad store config: {exc}") from None


class SeqSet:
    """Set of positive integers stored as sorted, disjoint, closed intervals."""

    __slots__ = ("_lo", "_hi")

    def __init__(self, intervals: Iterable[tuple[int, int]] = ()):
        self._lo: list[int] = []
        self._hi: list[int] = []
        for lo, hi in intervals:
            self.add_range(lo, hi)

    def __contains__(self, n: int) -> bool:
        i = bisect.bisect_right(self._lo, n) - 1
        return i >= 0 and n <= self._hi[i]

    def __len__(self) -> int:
        return sum(h - l + 1 for l, h in zip(self._lo, self._hi))

    def __eq__(self, other) -> bool:
        return isinstance(other, SeqSet) and self.intervals() == other.intervals()

    def __repr__(self) -> str:
        return f"SeqSet({self.intervals()})"

    def add(self, n: int) -> None:
        # fast path: extending the last interval is the common case
        if self._hi and self._hi[-1] + 1 == n:
            self._hi[-1] = n
            return
        self.add_range(n, n)

    def add_range(self, lo: int, hi: int) -> None:
        if hi < lo:
            return
        i = bisect.bisect_left(self._hi, lo - 1)
        j = bisect.bisect_right(self._lo, hi + 1)
        if i < j:
            lo = min(lo, self._lo[i])
            hi = max(hi, self._hi[j - 1])
        self._lo[i:j] = [lo]
        self._hi[i:j] = [hi]

    def intervals(self) -> list[tuple[int, int]]:
        return list(zip(self._lo, self._hi))

    def contiguous(self) -> int:
        """Highest n such that 1..n are all present (0 when 1 is missing)."""
        if self._lo and self._lo[0] <= 1:
            return self._hi[0]
        return 0

    def max(self) -> int:
        return self._hi[-1] if self._hi else 0

    def copy(self) -> "SeqSet":
        s = SeqSet()
        s._lo = list(self._lo)
        s._hi = list(self._hi)
        return s

    def missing(self, upto: int) -> Iterator[int]:
        """Yield the integers in 1..upto that are absent, ascending."""
        nxt = 1
        for lo, hi in zip(self._lo, self._hi):
            if lo > upto:
                break
            yield from range(nxt, min(lo, upto + 1))
            nxt = max(nxt, hi + 1)
        yield from range(nxt, upto + 1)


def rank(rec: Record) -> tuple:
    """Total order used to pick the visible version of a key."""
    return (rec.prov.write_ts, rec.prov.origin_id, rec.prov.origin_seq)


@dataclass
class ApplyResult:
    committed: bool
    conflict: bool = False
    visible_changed: bool = False


@dataclass
class StoreStats:
    committed: Counter = field(default_factory=Counter)  # by Op, this session
    remote_committed: Counter = field(default_factory=Counter)
    conflicts: int = 0
    duplicates: int = 0
    evicted: int = 0


class Sealer:
    """Binds a crypto provider to one store data key."""

    AAD = b"microdb-record-v1"

    def __init__(self, provider, key: bytes):
        self.provider = provider
        self.key = key

    def seal(self, plaintext: bytes) -> bytes:
        return self.provider.seal(self.key, plaintext, self.AAD)

    def open(self, frame: bytes) -> bytes:
        return self.provider.open(self.key, frame, self.AAD)


class ColumnStore:
    """One named column store. All mutation goes through ``lock``."""

    def __init__(
        self,
        config: ColumnStoreConfig,
        origin_id: str,
        path: Optional[Path] = None,
        sealer: Optional[Sealer] = None,
        fsync: bool = False,
    ):
        self.config = config
        self.origin_id = origin_id
        self.path = Path(path) if path is not None else None
        self.sealer = sealer
        self.fsync = fsync
        self.lock = threading.RLock()
        self.stats = StoreStats()

        self._keys: list[tuple[int, int]] = []  # visible keys, sorted
        self._visible: dict[tuple[int, int], Record] = {}
        self._versions: dict[tuple[int, int], list[Record]] = {}
        self._by_origin: dict[str, dict[int, Record]] = {}
        self._seen: dict[str, SeqSet] = {}
        self._ts_next_seq: dict[int, int] = {}
        self._live = 0  # visible non-tombstone records
        self._fh = None

        if config.encrypted and sealer is None:
            from .errors import NoKey

            raise NoKey(f"store {config.name!r} is encrypted but no data key is available")
        if self.path is not None:
            self._replay()
            self._fh = open(self.path, "ab")

    @property
    def name(self) -> str:
        return self.config.name

    @property
    def mutable(self) -> bool:
        return self.config.mutability is Mutability.MUTABLE

    # -- persistence ---------------------------------------------------

    def _replay(self) -> None:
        if not self.path.exists():
            return
        data = self.path.read_bytes()
        pos = 0
        good = 0
        while pos < len(data):
            if pos + _FRAME_HEAD.size > len(data):
                break
            length, kind = _FRAME_HEAD.unpack_from(data, pos)
            end = pos + _FRAME_HEAD.size + length
            if end > len(data):
                break
            payload = data[pos + _FRAME_HEAD.size:end]
            if self.sealer is not None:
                payload = self.sealer.open(payload)
            rec = codec.decode_record(payload)
            if (kind == FRAME_TOMBSTONE) != rec.tombstone:
                raise DecodeError(f"{self.path}: frame kind {kind} disagrees with record op {rec.op.name}")
            self._index(rec)
            pos = good = end
        if good < len(data):
            logger.warning("%s: dropping %d bytes of torn tail frame", self.path, len(data) - good)
            with open(self.path, "r+b") as fh:
                fh.truncate(good)

    def _write(self, rec: Record) -> None:
        if self._fh is None:
            return
        payload = codec.encode_record(rec)
        if self.sealer is not None:
            payload = self.sealer.seal(payload)
        kind = FRAME_TOMBSTONE if rec.tombstone else FRAME_RECORD
        self._fh.write(_FRAME_HEAD.pack(len(payload), kind) + payload)
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    # -- indexing ------------------------------------------------------

    def _index(self, rec: Record) -> ApplyResult:
        seen = self._seen.get(rec.prov.origin_id)
        if seen is None:
            seen = self._seen[rec.prov.origin_id] = SeqSet()
        seen.add(rec.prov.origin_seq)
        self._by_origin.setdefault(rec.prov.origin_id, {})[rec.prov.origin_seq] = rec

        k = (rec.key.ts, rec.key.seq)
        nxt = self._ts_next_seq.get(k[0], 0)
        if k[1] >= nxt:
            self._ts_next_seq[k[0]] = k[1] + 1

        versions = self._versions.get(k)
        conflict = False
        if versions is None:
            self._versions[k] = [rec]
            self._visible[k] = rec
            bisect.insort(self._keys, k)
            if not rec.tombstone:
                self._live += 1
            changed = True
        else:
            if not self.mutable:
                cur = self._visible[k]
                if not codec.values_equal(cur.value, rec.value) or cur.op != rec.op:
                    conflict = True
                    self.stats.conflicts += 1
            versions.append(rec)
            cur = self._visible[k]
            changed = rank(rec) > rank(cur)
            if changed:
                self._visible[k] = rec
                self._live += (not rec.tombstone) - (not cur.tombstone)
        self._evict()
        return ApplyResult(True, conflict, changed)

    def _evict(self) -> None:
        limit = self.config.retention
        if limit is None:
            return
        while len(self._keys) > limit:
            k = self._keys.pop(0)
            rec = self._visible.pop(k)
            if not rec.tombstone:
                self._live -= 1
            for v in self._versions.pop(k):
                self._by_origin[v.prov.origin_id].pop(v.prov.origin_seq, None)
            self.stats.evicted += 1

    # -- writes --------------------------------------------------------

    def next_key(self, ts: int) -> RecordKey:
        return RecordKey(ts, self._ts_next_seq.get(ts, 0))

    def commit_local(self, key: RecordKey, value: Any, op: Op, write_ts: int) -> Record:
        """Commit a locally originated record under a fresh provenance.

        The caller is responsible for key allocation (``next_key``) and for
        mutability checks; this only assigns the origin sequence.
        """
        with self.lock:
            seen = self._seen.get(self.origin_id)
            origin_seq = (seen.contiguous() if seen is not None else 0) + 1
            rec = Record(key, value, Provenance(self.origin_id, origin_seq, write_ts), op)
            self._write(rec)
            self._index(rec)
            self.stats.committed[op] += 1
            return rec

    def append(self, ts: int, value: Any, write_ts: int) -> Record:
        with self.lock:
            return self.commit_local(self.next_key(ts), value, Op.CREATE, write_ts)

    def mutate(self, key: RecordKey, value: Any, write_ts: int, delete: bool = False) -> Record:
        with self.lock:
            if not self.mutable:
                raise ImmutableStore(f"store {self.name!r} is immutable")
            cur = self._visible.get((key.ts, key.seq))
            if cur is None or cur.tombstone:
                raise KeyNotFound(f"no record at key {key} in {self.name!r}")
            # the new version must outrank the one it replaces
            if (write_ts, self.origin_id) <= (cur.prov.write_ts, cur.prov.origin_id):
                write_ts = cur.prov.write_ts + 1
            op = Op.DELETE if delete else Op.UPDATE
            return self.commit_local(key, None if delete else value, op, write_ts)

    def has(self, origin_id: str, origin_seq: int) -> bool:
        seen = self._seen.get(origin_id)
        return seen is not None and origin_seq in seen

    def mark_seen(self, origin_id: str, origin_seq: int) -> None:
        """Record that a replicated record was received but deliberately not stored."""
        with self.lock:
            self._seen.setdefault(origin_id, SeqSet()).add(origin_seq)

    def apply_remote(self, rec: Record) -> ApplyResult:
        """Commit a replicated record, deduplicating on (origin_id, origin_seq)."""
        with self.lock:
            if self.has(rec.prov.origin_id, rec.prov.origin_seq):
                self.stats.duplicates += 1
                return ApplyResult(False)
            self._write(rec)
            res = self._index(rec)
            self.stats.committed[rec.op] += 1
            self.stats.remote_committed[rec.op] += 1
            return res

    # -- reads ---------------------------------------------------------

    def get(self, key: RecordKey) -> Optional[Record]:
        """Visible version at ``key`` (tombstones included), or None."""
        return self._visible.get((key.ts, key.seq))

    def versions(self, key: RecordKey) -> list[Record]:
        with self.lock:
            return sorted(self._versions.get((key.ts, key.seq), []), key=rank)

    def read_range(self, lo: Optional[RecordKey] = None, hi: Optional[RecordKey] = None,
                   limit: Optional[int] = None) -> list[Record]:
        with self.lock:
            i = 0 if lo is None else bisect.bisect_left(self._keys, (lo.ts, lo.seq))
            j = len(self._keys) if hi is None else bisect.bisect_left(self._keys, (hi.ts, hi.seq))
            out = []
            for k in self._keys[i:j]:
                rec = self._visible[k]
                if rec.tombstone:
                    continue
                out.append(rec)
                if limit is not None and len(out) >= limit:
                    break
            return out

    def visible_records(self, key_range: Optional[KeyRange] = None) -> list[Record]:
        """Visible versions including tombstones, in key order."""
        with self.lock:
            if key_range is None or key_range.unbounded:
                keys = list(self._keys)
            else:
                lo, hi = key_range.lo, key_range.hi
                i = 0 if lo is None else bisect.bisect_left(self._keys, (lo.ts, lo.seq))
                j = len(self._keys) if hi is None else bisect.bisect_left(self._keys, (hi.ts, hi.seq))
                keys = self._keys[i:j]
            return [self._visible[k] for k in keys]

    def all_records(self) -> list[Record]:
        """Every held version, ordered by (origin_id, origin_seq)."""
        with self.lock:
            return [
                self._by_origin[o][s]
                for o in sorted(self._by_origin)
                for s in sorted(self._by_origin[o])
            ]

    def __len__(self) -> int:
        return self._live

    def holdings(self) -> dict[str, SeqSet]:
        with self.lock:
            return {o: s.copy() for o, s in self._seen.items()}

    def origin_records(self, origin_id: str) -> dict[int, Record]:
        return self._by_origin.get(origin_id, {})

    def content_hash(self, key_range: Optional[KeyRange] = None,
                     predicate: Optional[Callable[[Record], bool]] = None) -> bytes:
        """SHA-256 over the canonical form of the visible records.

        Records (tombstones included) are sorted by (key, origin_id,
        origin_seq) and each contributes ``u32 length | canonical bytes``.
        """
        recs = self.visible_records(key_range)
        if predicate is not None:
            recs = [r for r in recs if predicate(r)]
        recs.sort(key=lambda r: (r.key.ts, r.key.seq, r.prov.origin_id, r.prov.origin_seq))
        h = hashlib.sha256()
        for rec in recs:
            payload = codec.encode_record(rec)
            h.update(struct.pack(">I", len(payload)))
            h.update(payload)
        return h.digest()

