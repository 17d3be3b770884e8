"""Tier-local notification hub and the callback pipeline.

Events are content free: they name the transaction, the store and the key,
never the value. Subscribers pull from bounded queues; on overflow the
oldest event is dropped and the subscription's ``gap`` flag is raised.

Callbacks run in registration order per stage. The first reject stops the
chain; transforms compose; a transform may not change the record key.
"""

from __future__ import annotations

import fnmatch
import itertools
import logging
import math
import threading
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, Union

from . import codec
from .errors import Duplicate, InvalidConfig, KeyMutation, UnknownSubscription
from .records import KeyRange, Record, RecordKey

logger = logging.getLogger(__name__)

TXNS = ("create", "update", "delete", "create-store", "delete-store")
STAGES = ("ingest", "exchange", "sync-in", "sync-out")
DEFAULT_QUEUE_CAPACITY = 1024


@dataclass(frozen=True)
class Event:
    event_seq: int
    txn: str
    store: str
    key: Optional[RecordKey]
    actor: str
    emit_ts: int

    def line(self) -> str:
        key = str(self.key) if self.key is not None else "-"
        return f"{self.event_seq}\t{self.txn}\t{self.store}\t{key}\t{self.actor}"

    def encode(self) -> bytes:
        w = codec.Writer().u64(self.event_seq).str(self.txn).str(self.store)
        if self.key is None:
            w.u8(0)
        else:
            w.u8(1).i64(self.key.ts).u64(self.key.seq)
        return w.str(self.actor).i64(self.emit_ts).getvalue()

    def to_json(self) -> dict:
        return {
            "event_seq": self.event_seq,
            "txn": self.txn,
            "store": self.store,
            "key": [self.key.ts, self.key.seq] if self.key is not None else None,
            "actor": self.actor,
            "emit_ts": self.emit_ts,
        }


@dataclass(frozen=True)
class EventFilter:
    store: str = "*"
    txns: frozenset = frozenset(TXNS)
    range: Optional[KeyRange] = None

    def __post_init__(self):
        object.__setattr__(self, "txns", frozenset(self.txns))
        bad = self.txns - set(TXNS)
        if bad:
            raise InvalidConfig(f"unknown txn kinds {sorted(bad)}")

    def matches(self, ev: Event) -> bool:
        if self.store != "*" and self.store != ev.store:
            return False
        if ev.txn not in self.txns:
            return False
        if self.range is not None:
            return ev.key is not None and self.range.contains_key(ev.key)
        return True


class Subscription:
    def __init__(self, sub_id: str, flt: EventFilter, subject: str, capacity: int = DEFAULT_QUEUE_CAPACITY):
        self.id = sub_id
        self.filter = flt
        self.subject = subject
        self.capacity = capacity
        self.gap = False
        self.dropped = 0
        self._queue: deque[Event] = deque()
        self._cond = threading.Condition()

    def _deliver(self, ev: Event) -> None:
        with self._cond:
            if len(self._queue) >= self.capacity:
                self._queue.popleft()
                self.gap = True
                self.dropped += 1
            self._queue.append(ev)
            self._cond.notify_all()

    def drain(self, max_events: Optional[int] = None) -> list[Event]:
        with self._cond:
            n = len(self._queue) if max_events is None else min(max_events, len(self._queue))
            return [self._queue.popleft() for _ in range(n)]

    def wait(self, timeout: Optional[float] = None, max_events: Optional[int] = None) -> list[Event]:
        """Block until at least one event is queued (or timeout), then drain."""
        with self._cond:
            if not self._queue:
                self._cond.wait(timeout)
        return self.drain(max_events)

    def __len__(self) -> int:
        return len(self._queue)


class EventBus:
    def __init__(self, clock: Callable[[], int]):
        self.clock = clock
        self._lock = threading.Lock()
        self._subs: dict[str, Subscription] = {}
        self._seq: dict[str, int] = {}
        self._ids = itertools.count(1)
        self.emitted: Counter = Counter()  # (store, txn) -> count

    def subscribe(self, flt: EventFilter, subject: str, capacity: int = DEFAULT_QUEUE_CAPACITY) -> Subscription:
        with self._lock:
            sub = Subscription(f"sub-{next(self._ids)}", flt, subject, capacity)
            self._subs[sub.id] = sub
            return sub

    def unsubscribe(self, sub_id: str) -> None:
        with self._lock:
            if self._subs.pop(sub_id, None) is None:
                raise UnknownSubscription(f"no subscription {sub_id!r}")

    def get(self, sub_id: str) -> Subscription:
        try:
            return self._subs[sub_id]
        except KeyError:
            raise UnknownSubscription(f"no subscription {sub_id!r}") from None

    def emit(self, txn: str, store: str, key: Optional[RecordKey], actor: str) -> Event:
        """Publish one committed transaction. Never raises into the writer."""
        with self._lock:
            seq = self._seq.get(store, 0) + 1
            self._seq[store] = seq
            ev = Event(seq, txn, store, key, actor, self.clock())
            self.emitted[(store, txn)] += 1
            subs = list(self._subs.values())
        for sub in subs:
            if sub.filter.matches(ev):
                try:
                    sub._deliver(ev)
                except Exception:  # pragma: no cover - defensive
                    logger.exception("delivery to %s failed", sub.id)
        return ev


# -- callbacks ----------------------------------------------------------------


@dataclass(frozen=True)
class Reject:
    reason: str = "rejected"


Action = Callable[[Record], Union[Record, Reject, None]]


@dataclass(frozen=True)
class CallbackSpec:
    id: str
    stage: str
    action: Action = field(compare=False)
    store: str = "*"
    role: Optional[str] = None
    declaration: Optional[dict] = field(default=None, compare=False)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise InvalidConfig(f"unknown callback stage {self.stage!r}")

    def applies(self, store: str, roles: Iterable[str]) -> bool:
        if not fnmatch.fnmatchcase(store, self.store):
            return False
        if self.role is not None:
            return any(fnmatch.fnmatchcase(r, self.role) for r in roles)
        return True


@dataclass(frozen=True)
class ChainResult:
    record: Optional[Record]
    rejected_by: Optional[str] = None
    reason: str = ""

    @property
    def accepted(self) -> bool:
        return self.rejected_by is None


class CallbackRegistry:
    def __init__(self):
        self._lock = threading.Lock()
        self._specs: dict[str, CallbackSpec] = {}

    def register(self, spec: CallbackSpec) -> None:
        with self._lock:
            if spec.id in self._specs:
                raise Duplicate(f"callback {spec.id!r} already registered")
            self._specs[spec.id] = spec

    def unregister(self, cb_id: str) -> None:
        with self._lock:
            self._specs.pop(cb_id, None)

    def __contains__(self, cb_id: str) -> bool:
        return cb_id in self._specs

    def specs(self) -> list[CallbackSpec]:
        return list(self._specs.values())

    def run_chain(self, stage: str, store: str, record: Record, roles: Iterable[str] = ()) -> ChainResult:
        roles = tuple(roles)
        chain = [s for s in self._specs.values() if s.stage == stage and s.applies(store, roles)]
        rec = record
        for spec in chain:
            out = spec.action(rec)
            if out is None:
                continue
            if isinstance(out, Reject):
                return ChainResult(None, spec.id, out.reason)
            if not isinstance(out, Record):
                raise TypeError(f"callback {spec.id!r} returned {type(out).__name__}")
            if out.key != rec.key:
                raise KeyMutation(f"callback {spec.id!r} changed key {rec.key} -> {out.key}")
            rec = out
        return ChainResult(rec)


# -- built-in callbacks -------------------------------------------------------


def _on_field(fn: Callable[[Any], Any], field_name: Optional[str]) -> Action:
    def action(rec: Record):
        if rec.tombstone:
            return None
        if field_name is None:
            out = fn(rec.value)
            return out if isinstance(out, Reject) else rec.with_value(out)
        if not isinstance(rec.value, dict) or field_name not in rec.value:
            return None
        out = fn(rec.value[field_name])
        if isinstance(out, Reject):
            return out
        value = dict(rec.value)
        value[field_name] = out
        return rec.with_value(value)

    return action


def range_clamp(min: Optional[float] = None, max: Optional[float] = None, field: Optional[str] = None,
                mode: str = "clamp") -> Action:
    """Clamp numeric values into [min, max]; NaN is always rejected.

    With ``mode="reject"`` out-of-range values are rejected instead of clamped.
    """
    if mode not in ("clamp", "reject"):
        raise InvalidConfig(f"range_clamp mode must be clamp or reject, got {mode!r}")

    def fn(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            return v
        if isinstance(v, float) and math.isnan(v):
            return Reject("NaN")
        if min is not None and v < min:
            return Reject(f"{v} < {min}") if mode == "reject" else type(v)(min)
        if max is not None and v > max:
            return Reject(f"{v} > {max}") if mode == "reject" else type(v)(max)
        return v

    return _on_field(fn, field)


def unit_scale(factor: float = 1.0, offset: float = 0.0, field: Optional[str] = None) -> Action:
    """Linear unit conversion ``v * factor + offset`` on numeric values."""

    def fn(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            return v
        return v * factor + offset

    return _on_field(fn, field)


def redact(fields: Iterable[str]) -> Action:
    """Drop the named fields from object values."""
    drop = frozenset(fields)

    def action(rec: Record):
        if rec.tombstone or not isinstance(rec.value, dict):
            return None
        return rec.with_value({k: v for k, v in rec.value.items() if k not in drop})

    return action


def reject_all(reason: str = "rejected") -> Action:
    return lambda rec: Reject(reason)


BUILTINS: dict[str, Callable[..., Action]] = {
    "range_clamp": range_clamp,
    "unit_scale": unit_scale,
    "redact": redact,
    "reject_all": reject_all,
}


def builtin_spec(decl: dict) -> CallbackSpec:
    """Build a CallbackSpec from a manifest declaration.

    ``{"id": ..., "stage": ..., "builtin": name, "params": {...}, "store": "*", "role": null}``
    """
    name = decl.get("builtin")
    if name not in BUILTINS:
        raise InvalidConfig(f"unknown built-in callback {name!r}")
    try:
        action = BUILTINS[name](**decl.get("params", {}))
    except TypeError as exc:
        raise InvalidConfig(f"callback {decl.get('id')!r}: {exc}") from None
    return CallbackSpec(decl["id"], decl["stage"], action, decl.get("store", "*"), decl.get("role"),
                        declaration=dict(decl))
