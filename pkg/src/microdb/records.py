"""Record-level value types shared by the store, sync and security layers."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Optional

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1


@dataclass(frozen=True, order=True)
class RecordKey:
    """Composite store key ordered lexicographically by (ts, seq).

    ``ts`` is integer nanoseconds since the Unix epoch (UTC); ``seq`` only
    becomes non-zero when two writes land on the same timestamp.
    """

    ts: int
    seq: int = 0

    def successor(self) -> "RecordKey":
        return RecordKey(self.ts, self.seq + 1)

    def __str__(self) -> str:
        return f"{self.ts},{self.seq}"

    @classmethod
    def parse(cls, text: str) -> "RecordKey":
        ts, _, seq = text.partition(",")
        return cls(int(ts), int(seq or 0))


MIN_KEY = RecordKey(INT64_MIN, 0)


@dataclass(frozen=True)
class KeyRange:
    """Half-open interval [lo, hi) over RecordKey; ``None`` bounds are unbounded."""

    lo: Optional[RecordKey] = None
    hi: Optional[RecordKey] = None

    def __post_init__(self):
        if self.lo is not None and self.hi is not None and not self.lo < self.hi:
            raise ValueError(f"empty key range [{self.lo}, {self.hi})")

    @classmethod
    def point(cls, key: RecordKey) -> "KeyRange":
        return cls(key, key.successor())

    @classmethod
    def ts(cls, lo: Optional[int], hi: Optional[int]) -> "KeyRange":
        return cls(
            RecordKey(lo) if lo is not None else None,
            RecordKey(hi) if hi is not None else None,
        )

    @property
    def unbounded(self) -> bool:
        return self.lo is None and self.hi is None

    def contains_key(self, key: RecordKey) -> bool:
        if self.lo is not None and key < self.lo:
            return False
        if self.hi is not None and not key < self.hi:
            return False
        return True

    def covers(self, other: "KeyRange") -> bool:
        """True when every key of ``other`` lies inside this range."""
        if self.lo is not None and (other.lo is None or other.lo < self.lo):
            return False
        if self.hi is not None and (other.hi is None or self.hi < other.hi):
            return False
        return True

    def to_json(self):
        return [
            [self.lo.ts, self.lo.seq] if self.lo is not None else None,
            [self.hi.ts, self.hi.seq] if self.hi is not None else None,
        ]

    @classmethod
    def from_json(cls, data) -> Optional["KeyRange"]:
        """Accepts ``null``, ``[lo, hi]`` with ints (ts) or ``[ts, seq]`` pairs."""
        if data is None:
            return None

        def bound(b):
            if b is None:
                return None
            if isinstance(b, int):
                return RecordKey(b)
            return RecordKey(int(b[0]), int(b[1]) if len(b) > 1 else 0)

        lo, hi = data
        return cls(bound(lo), bound(hi))

    def __str__(self) -> str:
        lo = str(self.lo) if self.lo is not None else "-inf"
        hi = str(self.hi) if self.hi is not None else "+inf"
        return f"[{lo}, {hi})"


class Op(IntEnum):
    CREATE = 1
    UPDATE = 2
    DELETE = 3

    @property
    def txn(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class Provenance:
    origin_id: str
    origin_seq: int
    write_ts: int


@dataclass(frozen=True)
class Record:
    key: RecordKey
    value: Any
    prov: Provenance
    op: Op = Op.CREATE

    @property
    def tombstone(self) -> bool:
        return self.op is Op.DELETE

    @property
    def origin(self) -> tuple[str, int]:
        return (self.prov.origin_id, self.prov.origin_seq)

    def with_value(self, value: Any) -> "Record":
        return Record(self.key, value, self.prov, self.op)
