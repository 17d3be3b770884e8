"""Ingest bindings: turn upstream source readings into appends.

A binding ties one column store to one source, either in push mode (the
source calls ``on_push``) or poll mode (``poll_tick`` queries due sources).
Outcomes never raise; every reading ends up counted as appended, duplicate
or dropped with a reason.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Optional, Protocol, Union

from .codec import values_equal
from .errors import (
    AlreadyBound,
    InvalidConfig,
    RejectedByCallback,
    SchemaViolation,
    SourceUnreachable,
    Unauthorized,
    UnknownStore,
)
from .records import KeyRange, Provenance, Record, RecordKey, Op
from .security import Grant, Interface, Principal

if TYPE_CHECKING:
    from .engine import Microdatabase, Receipt

logger = logging.getLogger(__name__)

MIN_POLL_MS = 10
MS = 1_000_000


@dataclass(frozen=True)
class IngestBinding:
    source_id: str
    store: str
    mode: str = "push"
    period_ms: Optional[int] = None
    address: str = ""
    ts_field: str = "ts"
    value_field: str = "value"

    def validate(self) -> None:
        if self.mode not in ("push", "poll"):
            raise InvalidConfig(f"ingest mode must be push or poll, got {self.mode!r}")
        if self.mode == "poll" and (self.period_ms is None or self.period_ms < MIN_POLL_MS):
            raise InvalidConfig(f"poll period must be >= {MIN_POLL_MS} ms")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "IngestBinding":
        known = {"source_id", "store", "mode", "period_ms", "address", "ts_field", "value_field"}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown ingest fields {sorted(unknown)}")
        return cls(**d)

    @property
    def actor(self) -> str:
        return f"ingest:{self.source_id}"


@dataclass
class IngestCounters:
    appended: int = 0
    dropped: int = 0
    duplicate: int = 0
    unreachable: int = 0


@dataclass(frozen=True)
class Dropped:
    reason: str


class Source(Protocol):
    def fetch(self, since_ts: Optional[int], now: int) -> list: ...


class ScriptedSource:
    """Replays a fixed list of (ts, value) readings.

    A reading becomes visible once the clock reaches its timestamp and
    stays available (the source retains its backlog). ``outages`` are
    half-open [start, end) windows during which ``fetch`` fails.
    """

    def __init__(self, readings: Iterable, outages: Iterable = ()):
        self.readings = sorted((int(ts), v) for ts, v in readings)
        self.outages = [(int(a), int(b)) for a, b in outages]

    def fetch(self, since_ts: Optional[int], now: int) -> list:
        if any(a <= now < b for a, b in self.outages):
            raise SourceUnreachable(f"source unreachable at {now}")
        return [(ts, v) for ts, v in self.readings if ts <= now and (since_ts is None or ts > since_ts)]

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ScriptedSource":
        """Parse the line format ``ts_ns<TAB>value_literal`` (blank lines and # comments skipped)."""
        readings = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                ts, literal = line.split("\t", 1)
                readings.append((int(ts), parse_literal(literal)))
            except ValueError as exc:
                raise InvalidConfig(f"{path}:{lineno}: {exc}") from None
        return cls(readings)


def parse_literal(text: str) -> Any:
    """JSON literal if it parses (numbers, true/false, quoted strings, objects), else raw text."""
    text = text.strip()
    if text in ("nan", "NaN"):
        return float("nan")
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


class SourceResolver:
    """Resolves binding address strings to sources.

    ``file:<path>`` loads a scripted source file; anything else must have
    been registered in-process.
    """

    def __init__(self):
        self._sources: dict[str, Source] = {}

    def register(self, address: str, source: Source) -> None:
        self._sources[address] = source

    def resolve(self, address: str) -> Source:
        if address in self._sources:
            return self._sources[address]
        if address.startswith("file:"):
            src = ScriptedSource.from_file(address[5:])
            self._sources[address] = src
            return src
        raise SourceUnreachable(f"no source registered at {address!r}")


class IngestManager:
    def __init__(self, db: "Microdatabase"):
        self.db = db
        self.resolver = SourceResolver()
        self.bindings: dict[str, IngestBinding] = {}
        self.counters: dict[str, IngestCounters] = {}
        self.last_seen: dict[str, Optional[int]] = {}
        self.deadline: dict[str, int] = {}
        self.dropped_unbound = 0

    def _by_source(self, source_id: str) -> Optional[IngestBinding]:
        for b in self.bindings.values():
            if b.source_id == source_id:
                return b
        return None

    def bind(self, binding: IngestBinding, principal: Principal = None) -> None:
        from .engine import SYSTEM

        principal = principal or SYSTEM
        self.db.require(principal, Interface.ADMIN, binding.store)
        binding.validate()
        if binding.store not in self.db.stores:
            raise UnknownStore(f"no store {binding.store!r}")
        if binding.store in self.bindings:
            raise AlreadyBound(f"store {binding.store!r} already has an ingest binding")
        if self._by_source(binding.source_id) is not None:
            raise AlreadyBound(f"source {binding.source_id!r} is already bound")
        self.bindings[binding.store] = binding
        self.counters[binding.store] = IngestCounters()
        self.last_seen.setdefault(binding.store, None)
        if binding.mode == "poll":
            self.deadline[binding.store] = self.db.clock() + binding.period_ms * MS
        self.enable_grant(binding.store)
        self.db.save_state()

    def unbind(self, store: str, principal: Principal = None) -> None:
        from .engine import SYSTEM

        principal = principal or SYSTEM
        self.db.require(principal, Interface.ADMIN, store)
        if store not in self.bindings:
            raise UnknownStore(f"store {store!r} has no ingest binding")
        self.forget_store(store)
        self.db.save_state()

    def forget_store(self, store: str) -> None:
        b = self.bindings.pop(store, None)
        if b is not None:
            self.db.security.clear_implicit(b.actor)
        self.counters.pop(store, None)
        self.last_seen.pop(store, None)
        self.deadline.pop(store, None)

    def enable_grant(self, store: str) -> None:
        b = self.bindings[store]
        # update covers idempotent re-ingest of a changed reading into a mutable store
        self.db.security.set_implicit(
            b.actor, [Grant(Interface.EXCHANGE_CREATE, store), Grant(Interface.EXCHANGE_UPDATE, store)]
        )

    def disable_grant(self, store: str) -> None:
        self.db.security.clear_implicit(self.bindings[store].actor)

    # -- ingest path -----------------------------------------------------

    def _map(self, binding: IngestBinding, reading) -> tuple[int, Any]:
        if isinstance(reading, dict):
            return int(reading[binding.ts_field]), reading[binding.value_field]
        ts, value = reading
        return int(ts), value

    def _ingest(self, binding: IngestBinding, reading) -> Union["Receipt", Dropped]:
        counters = self.counters[binding.store]
        principal = Principal(binding.actor, "ingest")
        try:
            ts, value = self._map(binding, reading)
        except (KeyError, TypeError, ValueError):
            counters.dropped += 1
            return Dropped("malformed")
        key = RecordKey(ts, 0)
        try:
            self.db.require(principal, Interface.EXCHANGE_CREATE, binding.store, KeyRange.point(key))
        except Unauthorized:
            counters.dropped += 1
            return Dropped("unauthorized")
        store = self.db.store(binding.store)
        draft = Record(key, value, Provenance(self.db.replica_id, 0, self.db.clock()), Op.CREATE)
        result = self.db.callbacks.run_chain("ingest", binding.store, draft, ())
        if not result.accepted:
            counters.dropped += 1
            return Dropped("rejected-by-callback")
        value = result.record.value
        existing = store.get(key)
        try:
            if existing is not None and not existing.tombstone:
                if values_equal(existing.value, value):
                    counters.duplicate += 1
                    return Dropped("duplicate")
                if not store.mutable:
                    counters.dropped += 1
                    return Dropped("conflict")
                receipt = self.db.mutate(binding.store, key, value, principal)
            else:
                receipt = self.db.append(binding.store, ts, value, principal, actor=binding.actor, stage=None)
        except (SchemaViolation, RejectedByCallback, Unauthorized) as exc:
            counters.dropped += 1
            return Dropped(exc.code)
        counters.appended += 1
        return receipt

    def on_push(self, source_id: str, reading) -> Union["Receipt", Dropped]:
        binding = self._by_source(source_id)
        if binding is None:
            self.dropped_unbound += 1
            logger.warning("dropping reading from unbound source %r", source_id)
            return Dropped("unbound")
        if binding.mode != "push":
            self.counters[binding.store].dropped += 1
            return Dropped("not-push")
        return self._ingest(binding, reading)

    def poll_tick(self, now: int) -> int:
        """Query every due poll binding once; return the number of records appended."""
        appended = 0
        before = dict(self.last_seen)
        for store in sorted(self.bindings):
            b = self.bindings[store]
            if b.mode != "poll" or self.deadline.get(store, now + 1) > now:
                continue
            period = b.period_ms * MS
            self.deadline[store] += period
            if self.deadline[store] <= now:
                self.deadline[store] = now + period
            try:
                readings = self.resolver.resolve(b.address).fetch(self.last_seen[store], now)
            except SourceUnreachable:
                self.counters[store].unreachable += 1
                continue
            readings = sorted(readings, key=lambda r: self._map(b, r)[0])
            for reading in readings:
                ts = self._map(b, reading)[0]
                last = self.last_seen[store]
                if last is not None and ts <= last:
                    continue
                out = self._ingest(b, reading)
                if not isinstance(out, Dropped):
                    appended += 1
                self.last_seen[store] = ts
        if self.last_seen != before:
            self.db.save_state()
        return appended

    def next_due(self) -> Optional[int]:
        due = [self.deadline[s] for s, b in self.bindings.items() if b.mode == "poll" and s in self.deadline]
        return min(due) if due else None

    def status(self) -> list[dict]:
        rows = []
        for store in sorted(self.bindings):
            b = self.bindings[store]
            c = self.counters[store]
            rows.append({"source_id": b.source_id, "store": store, "mode": b.mode, **asdict(c)})
        return rows

    def to_json(self) -> list[dict]:
        return [self.bindings[s].to_json() for s in sorted(self.bindings)]

    def state_json(self) -> dict:
        return {s: v for s, v in sorted(self.last_seen.items())}

    def load_json(self, bindings: list[dict], last_seen: dict) -> None:
        for d in bindings:
            b = IngestBinding.from_json(d)
            self.bindings[b.store] = b
            self.counters[b.store] = IngestCounters()
            self.last_seen[b.store] = last_seen.get(b.store)
            if b.mode == "poll":
                self.deadline[b.store] = self.db.clock() + b.period_ms * MS
            self.enable_grant(b.store)
