"""Filtered bidirectional anti-entropy between adjacent tiers.

A round on a link runs four exchanges between an initiator and a
responder, each side speaking for its own replica:

    HELLO   per-store, per-origin holdings (contiguous watermark plus any
            held intervals above it) and the policy-set version
    DELTA   every in-filter record the peer lacks, at most 1000 per frame,
            closed by a frame with the final flag set
    POLICY  the full policy-set bundle; the higher (seq, digest) wins
    ACK     contiguous watermarks after commit; the peer advances its
            acknowledged vector from these

Frame: ``u32 payload length | u8 type | u8 version | payload``. Every frame
after HELLO is sealed with the link key, the two header bytes as AAD.
Receivers dedup on (store, origin_id, origin_seq), which makes a round
safe to repeat after an interruption at any point.
"""

from __future__ import annotations

import fnmatch
import json
import logging
import struct
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Iterator, Optional, Protocol

from . import codec
from .errors import (
    AuthFailure,
    DecodeError,
    InvalidConfig,
    MicrodbError,
    NonAdjacentTier,
    NotFound,
    PolicyBlocked,
    TransportDown,
)
from .records import KeyRange, Record
from .security import TIER_KINDS, Interface, PolicySet, Principal, tiers_adjacent
from .store import SeqSet, rank

if TYPE_CHECKING:
    from .engine import Microdatabase

logger = logging.getLogger(__name__)

HELLO, DELTA, POLICY, ACK = 0x10, 0x11, 0x12, 0x13
FRAME_NAMES = {HELLO: "HELLO", DELTA: "DELTA", POLICY: "POLICY", ACK: "ACK"}
PROTOCOL_VERSION = 0x01
BATCH_LIMIT = 1000
_HEAD = struct.Struct(">IBB")

MODE_FULL = 0
MODE_REGISTRY = 1


# -- framing ------------------------------------------------------------------


def encode_frame(ftype: int, payload: bytes, version: int = PROTOCOL_VERSION) -> bytes:
    return _HEAD.pack(len(payload), ftype, version) + payload


def iter_frames(buf: bytes) -> Iterator[tuple[int, int, bytes]]:
    """Split a byte stream into (type, version, payload) frames."""
    view = memoryview(buf)
    pos = 0
    while pos < len(view):
        if len(view) - pos < _HEAD.size:
            raise DecodeError(f"truncated frame header at offset {pos}")
        n, ftype, version = _HEAD.unpack_from(view, pos)
        pos += _HEAD.size
        if len(view) - pos < n:
            raise DecodeError(f"truncated frame payload at offset {pos}: need {n} bytes")
        yield ftype, version, bytes(view[pos:pos + n])
        pos += n


def split_frames(buf: bytes) -> list[bytes]:
    """Split a byte stream into whole raw frames (header included)."""
    out = []
    pos = 0
    for _, _, payload in iter_frames(buf):
        end = pos + _HEAD.size + len(payload)
        out.append(bytes(buf[pos:end]))
        pos = end
    return out


def _aad(ftype: int, version: int) -> bytes:
    return bytes((ftype, version))


# -- configuration types ------------------------------------------------------


def _is_pattern(name: str) -> bool:
    return any(c in name for c in "*?[")


@dataclass(frozen=True)
class SyncFilter:
    """Which data a link carries: store names/patterns, a key range, a tag."""

    stores: tuple[str, ...] = ()
    range: Optional[KeyRange] = None
    tag: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "stores", tuple(self.stores))
        if not self.stores and self.range is None and self.tag is None:
            raise InvalidConfig("sync filter needs at least one selector")

    def selects_store(self, name: str, tags: Iterable[str] = ()) -> bool:
        if self.stores and not any(fnmatch.fnmatchcase(name, p) for p in self.stores):
            return False
        if self.tag is not None and self.tag not in set(tags):
            return False
        return True

    def contains(self, rec: Record) -> bool:
        return self.range is None or self.range.contains_key(rec.key)

    def explicit_names(self) -> list[str]:
        return [s for s in self.stores if not _is_pattern(s)]

    def to_json(self) -> dict:
        return {"stores": list(self.stores), "range": KeyRange.to_json(self.range) if self.range else None,
                "tag": self.tag}

    @classmethod
    def from_json(cls, d: dict) -> "SyncFilter":
        return cls(tuple(d.get("stores", ())), KeyRange.from_json(d.get("range")), d.get("tag"))


class WatermarkVector:
    """(store, origin_id) -> highest contiguous origin_seq; entries never decrease."""

    def __init__(self, entries: Optional[dict[tuple[str, str], int]] = None):
        self._w: dict[tuple[str, str], int] = {}
        for (s, o), n in (entries or {}).items():
            self.advance(s, o, n)

    def advance(self, store: str, origin: str, seq: int) -> bool:
        if seq > self._w.get((store, origin), 0):
            self._w[(store, origin)] = seq
            return True
        return False

    def get(self, store: str, origin: str) -> int:
        return self._w.get((store, origin), 0)

    def drop_store(self, store: str) -> None:
        for k in [k for k in self._w if k[0] == store]:
            del self._w[k]

    def items(self) -> list[tuple[tuple[str, str], int]]:
        return sorted(self._w.items())

    def as_dict(self) -> dict[tuple[str, str], int]:
        return dict(self._w)

    def __len__(self) -> int:
        return len(self._w)

    def to_json(self) -> list:
        return [[s, o, n] for (s, o), n in self.items()]

    @classmethod
    def from_json(cls, data: list) -> "WatermarkVector":
        return cls({(s, o): int(n) for s, o, n in data})


@dataclass
class SyncLink:
    link_id: str
    peer_id: str
    peer_tier: str
    filter: SyncFilter
    period_ms: Optional[int] = None
    key: Optional[bytes] = None  # shared link secret; derived from the owner key when absent
    acked: WatermarkVector = field(default_factory=WatermarkVector)

    def to_json(self, include_state: bool = False) -> dict:
        d = {
            "link_id": self.link_id,
            "peer_id": self.peer_id,
            "peer_tier": self.peer_tier,
            "filter": self.filter.to_json(),
            "period_ms": self.period_ms,
        }
        if include_state:
            d["key"] = self.key.hex() if self.key else None
            d["acked"] = self.acked.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SyncLink":
        key = d.get("key")
        return cls(
            d["link_id"],
            d["peer_id"],
            d["peer_tier"],
            SyncFilter.from_json(d["filter"]),
            d.get("period_ms"),
            bytes.fromhex(key) if key else None,
            WatermarkVector.from_json(d.get("acked", [])),
        )


@dataclass
class SyncReport:
    link_id: str
    peer_id: str = ""
    sent: Counter = field(default_factory=Counter)  # store -> records shipped
    received: Counter = field(default_factory=Counter)  # store -> records committed
    duplicates: int = 0
    rejected: int = 0
    conflicts: int = 0
    policy_bundles: int = 0
    policy_adopted: bool = False
    warnings: list[str] = field(default_factory=list)

    @property
    def exchanged(self) -> int:
        return sum(self.sent.values()) + sum(self.received.values())

    def warn(self, msg: str) -> None:
        if msg not in self.warnings:
            self.warnings.append(msg)

    def to_json(self) -> dict:
        return {
            "link_id": self.link_id,
            "peer_id": self.peer_id,
            "sent": dict(sorted(self.sent.items())),
            "received": dict(sorted(self.received.items())),
            "duplicates": self.duplicates,
            "rejected": self.rejected,
            "conflicts": self.conflicts,
            "policy_bundles": self.policy_bundles,
            "policy_adopted": self.policy_adopted,
            "warnings": list(self.warnings),
        }


def resolve_conflict(local: Record, remote: Record) -> Record:
    """Winner between two versions of one key: greater (write_ts, origin_id, origin_seq)."""
    return max(local, remote, key=rank)


# -- transports ---------------------------------------------------------------


class Transport(Protocol):
    def exchange(self, frames: list[bytes]) -> list[bytes]: ...


class InMemoryTransport:
    """Delivers frames to a peer's ``SyncManager`` in process.

    Frames go over as one byte stream per frame and come back the same way,
    so framing is exercised exactly as on a socket. ``capture`` (a list)
    receives ``("out"|"in", frame)`` tuples. ``fail_after=n`` delivers the
    first n frames of the round (both directions counted) and then fails as
    a dropped connection would.
    """

    def __init__(self, peer: "SyncManager", up: bool = True, capture: Optional[list] = None,
                 fail_after: Optional[int] = None):
        self.peer = peer
        self.up = up
        self.capture = capture
        self.fail_after = fail_after
        self.delivered = 0

    def _tick(self) -> None:
        if self.fail_after is not None and self.delivered >= self.fail_after:
            raise TransportDown(f"connection dropped after {self.delivered} frames")
        self.delivered += 1

    def exchange(self, frames: list[bytes]) -> list[bytes]:
        if not self.up:
            raise TransportDown("link is down")
        replies: list[bytes] = []
        for frame in frames:
            self._tick()
            if self.capture is not None:
                self.capture.append(("out", frame))
            for reply in split_frames(self.peer.handle(frame)):
                self._tick()
                if self.capture is not None:
                    self.capture.append(("in", reply))
                replies.append(reply)
        return replies


class DownTransport:
    """A permanently failed transport (air gap, or no route to the peer)."""

    up = False

    def exchange(self, frames: list[bytes]) -> list[bytes]:
        raise TransportDown("link is down")


# -- a session: one side's view of one round ----------------------------------


class _Session:
    def __init__(self, mgr: "SyncManager", link: SyncLink, report: SyncReport, mode: int):
        self.mgr = mgr
        self.db = mgr.db
        self.link = link
        self.report = report
        self.mode = mode
        self.key = mgr.key_for(link)
        self.stores = mgr.filtered_stores(link, report, registry_only=mode == MODE_REGISTRY)
        self.peer_holdings: Optional[dict[str, dict[str, SeqSet]]] = None
        self.peer_done = False

    # sealing

    def seal(self, ftype: int, payload: bytes) -> bytes:
        return encode_frame(ftype, self.db.crypto.seal(self.key, payload, _aad(ftype, PROTOCOL_VERSION)))

    def open(self, ftype: int, version: int, payload: bytes) -> codec.Reader:
        return codec.Reader(self.db.crypto.open(self.key, payload, _aad(ftype, version)))

    # HELLO

    def hello(self) -> bytes:
        ver = self.db.security.policy.version()
        w = codec.Writer().str(self.link.link_id).str(self.db.replica_id).str(self.db.tier_kind).u8(self.mode)
        w.u64(ver[0]).raw(ver[1])
        w.u32(len(self.stores))
        for name in self.stores:
            holdings = self.db.store(name).holdings()
            w.str(name).u32(len(holdings))
            for origin in sorted(holdings):
                ivs = holdings[origin].intervals()
                contiguous = holdings[origin].contiguous()
                extra = [iv for iv in ivs if iv[0] > contiguous]
                w.str(origin).u64(contiguous).u32(len(extra))
                for lo, hi in extra:
                    w.u64(lo).u64(hi)
        return encode_frame(HELLO, w.getvalue())

    def on_hello(self, r: codec.Reader) -> None:
        r.str()  # link id, checked by the caller
        sender = r.str()
        tier = r.str()
        if sender != self.link.peer_id or tier != self.link.peer_tier:
            raise AuthFailure(f"unexpected peer {sender!r} ({tier}) on link {self.link.link_id!r}")
        r.u8()
        r.u64()
        r.raw(32)
        peer: dict[str, dict[str, SeqSet]] = {}
        for _ in range(r.u32()):
            name = r.str()
            origins = peer[name] = {}
            for _ in range(r.u32()):
                origin = r.str()
                contiguous = r.u64()
                s = SeqSet([(1, contiguous)] if contiguous else [])
                for _ in range(r.u32()):
                    s.add_range(r.u64(), r.u64())
                origins[origin] = s
        r.expect_end()
        self.peer_holdings = peer
        for name in self.stores:
            if name not in peer:
                self.report.warn(f"filter-miss: store {name!r} not offered by peer {self.link.peer_id}")

    # DELTA

    def _outgoing(self, name: str) -> Iterator[Record]:
        store = self.db.store(name)
        peer = self.peer_holdings.get(name, {})
        system = name == self.mgr.registry_store
        for origin, mine in sorted(store.holdings().items()):
            recs = store.origin_records(origin)
            have = peer.get(origin, SeqSet())
            for seq in have.missing(mine.max()):
                rec = recs.get(seq)
                if rec is None:
                    continue
                if not system:
                    if not self.link.filter.contains(rec):
                        continue
                    result = self.db.callbacks.run_chain("sync-out", name, rec)
                    if not result.accepted:
                        continue
                    rec = result.record
                yield rec

    def deltas(self) -> list[bytes]:
        frames = []
        for name in self.stores:
            if name not in self.peer_holdings:
                continue
            batch: list[Record] = []
            for rec in self._outgoing(name):
                batch.append(rec)
                if len(batch) == BATCH_LIMIT:
                    frames.append(self._delta(name, batch, final=False))
                    batch = []
            if batch:
                frames.append(self._delta(name, batch, final=False))
        frames.append(self._delta("", [], final=True))
        return frames

    def _delta(self, name: str, batch: list[Record], final: bool) -> bytes:
        w = codec.Writer().str(name).u8(1 if final else 0).u32(len(batch))
        for rec in batch:
            codec.write_record(w, rec)
        if batch:
            self.report.sent[name] += len(batch)
        return self.seal(DELTA, w.getvalue())

    def on_delta(self, r: codec.Reader) -> bool:
        name = r.str()
        final = r.u8() == 1
        recs = [codec.read_record(r) for _ in range(r.u32())]
        r.expect_end()
        if not recs:
            return final
        system = name == self.mgr.registry_store
        if name not in self.stores:
            self.report.warn(f"filter-miss: peer sent records for unselected store {name!r}")
            return final
        for rec in recs:
            if not system and not self.link.filter.contains(rec):
                self.report.warn(f"out-of-filter record for {name!r} dropped")
                continue
            outcome = self.db.apply_replicated(name, rec)
            if outcome == "duplicate":
                self.report.duplicates += 1
            elif outcome == "rejected":
                self.report.rejected += 1
            else:
                self.report.received[name] += 1
                if outcome == "conflict":
                    self.report.conflicts += 1
        return final

    # POLICY

    def policy(self) -> bytes:
        bundle = self.db.security.policy
        return self.seal(POLICY, codec.Writer().u64(bundle.seq).bytes(bundle.canonical()).getvalue())

    def on_policy(self, r: codec.Reader) -> None:
        r.u64()
        try:
            bundle = PolicySet.from_json(json.loads(r.bytes()))
        except (ValueError, KeyError, TypeError, MicrodbError) as exc:
            raise DecodeError(f"bad policy bundle: {exc}") from None
        r.expect_end()
        self.report.policy_bundles += 1
        if self.db.security.adopt(bundle):
            self.report.policy_adopted = True

    # ACK

    def ack(self) -> bytes:
        w = codec.Writer().str(self.db.replica_id)
        entries = []
        for name in self.stores:
            for origin, s in sorted(self.db.store(name).holdings().items()):
                entries.append((name, origin, s.contiguous()))
        w.u32(len(entries))
        for name, origin, n in entries:
            w.str(name).str(origin).u64(n)
        return self.seal(ACK, w.getvalue())

    def on_ack(self, r: codec.Reader) -> None:
        r.str()
        for _ in range(r.u32()):
            name, origin, n = r.str(), r.str(), r.u64()
            if name in self.stores:
                self.link.acked.advance(name, origin, n)
        r.expect_end()


# -- manager ------------------------------------------------------------------


class SyncManager:
    def __init__(self, db: "Microdatabase"):
        from .engine import REGISTRY_STORE

        self.db = db
        self.registry_store = REGISTRY_STORE
        self.links: dict[str, SyncLink] = {}
        self._round_locks: dict[str, threading.Lock] = {}
        self._sessions: dict[str, _Session] = {}  # responder side, by link id
        self._finished: dict[str, SyncReport] = {}

    # configuration

    def configure_link(self, link: SyncLink, principal: Principal = None) -> None:
        from .engine import SYSTEM

        principal = principal or SYSTEM
        targets = link.filter.explicit_names() or ["*"]
        for store in targets:
            self.db.require(principal, Interface.ADMIN, store)
            self.db.require(principal, Interface.SYNC, store, link.filter.range)
        if link.peer_tier not in TIER_KINDS:
            raise InvalidConfig(f"unknown tier kind {link.peer_tier!r}")
        if not tiers_adjacent(self.db.tier_kind, link.peer_tier):
            raise NonAdjacentTier(f"{self.db.tier_kind} and {link.peer_tier} are not adjacent tiers")
        if link.period_ms is not None and link.period_ms <= 0:
            raise InvalidConfig("sync period must be positive")
        for name in link.filter.explicit_names():
            if name in self.db.stores:
                blocked = self._blocking_policy(name, link.peer_tier)
                if blocked is not None:
                    raise PolicyBlocked(f"store {name!r} is blocked by sharing policy {blocked!r}",
                                        store=name, policy=blocked)
        old = self.links.get(link.link_id)
        if old is not None and old.peer_id == link.peer_id:
            link.acked = old.acked
        self.links[link.link_id] = link
        self._round_locks.setdefault(link.link_id, threading.Lock())
        self.db.save_state()

    def remove_link(self, link_id: str) -> None:
        self.link(link_id)
        del self.links[link_id]
        self._sessions.pop(link_id, None)
        self.db.save_state()

    def link(self, link_id: str) -> SyncLink:
        try:
            return self.links[link_id]
        except KeyError:
            raise NotFound(f"no sync link {link_id!r}") from None

    def key_for(self, link: SyncLink) -> bytes:
        return link.key or self.db.link_key(link.link_id)

    def _blocking_policy(self, store: str, peer_tier: str) -> Optional[str]:
        """Name of the sharing policy that forbids syncing ``store`` to ``peer_tier``, if any."""
        name = self.db.store(store).config.sharing_policy
        if name is None:
            return None
        policy = self.db.security.policy.policies.get(name)
        if policy is None or not policy.allows(peer_tier):
            return name
        return None

    def filtered_stores(self, link: SyncLink, report: SyncReport, registry_only: bool = False) -> list[str]:
        """Local stores this link carries, after the sharing-policy gate. Registry always included."""
        if registry_only:
            return [self.registry_store]
        out = []
        for name in self.db.user_stores():
            tags = self.db.models.store_tags(name) if link.filter.tag is not None else ()
            if not link.filter.selects_store(name, tags):
                continue
            blocked = self._blocking_policy(name, link.peer_tier)
            if blocked is not None:
                report.warn(f"policy-blocked: store {name!r} by policy {blocked!r}")
                continue
            out.append(name)
        for name in link.filter.explicit_names():
            if name not in self.db.stores:
                report.warn(f"filter-miss: store {name!r} does not exist")
        out.append(self.registry_store)
        return out

    def discard_store(self, name: str) -> None:
        for link in self.links.values():
            link.acked.drop_store(name)

    # initiator

    def sync_round(self, link_id: str, transport: Optional[Transport], registry_only: bool = False) -> SyncReport:
        """Run one full round on ``link_id`` as initiator."""
        link = self.link(link_id)
        if transport is None or not getattr(transport, "up", True):
            raise TransportDown(f"link {link_id!r} is down")
        with self._round_locks.setdefault(link_id, threading.Lock()):
            report = SyncReport(link_id, link.peer_id)
            sess = _Session(self, link, report, MODE_REGISTRY if registry_only else MODE_FULL)
            try:
                self._expect(sess, transport.exchange([sess.hello()]), {HELLO})
                self._expect(sess, transport.exchange(sess.deltas()), {DELTA})
                if not sess.peer_done:
                    raise DecodeError("peer did not finish its delta")
                if not registry_only:
                    self._expect(sess, transport.exchange([sess.policy()]), {POLICY})
                self._expect(sess, transport.exchange([sess.ack()]), {ACK})
            except TransportDown as exc:
                exc.details["report"] = report
                raise
            finally:
                self.db.save_state()
        return report

    def reconcile_registry(self, link_id: str, transport: Optional[Transport]) -> SyncReport:
        return self.sync_round(link_id, transport, registry_only=True)

    def _expect(self, sess: _Session, frames: list[bytes], allowed: set[int]) -> None:
        for raw in frames:
            for ftype, version, payload in iter_frames(raw):
                if version != PROTOCOL_VERSION:
                    raise DecodeError(f"unsupported protocol version {version}")
                if ftype not in allowed:
                    raise DecodeError(f"unexpected {FRAME_NAMES.get(ftype, hex(ftype))} frame")
                if ftype == HELLO:
                    r = codec.Reader(payload)
                    if r.str() != sess.link.link_id:
                        raise AuthFailure("peer answered for a different link")
                    sess.on_hello(codec.Reader(payload))
                    continue
                r = sess.open(ftype, version, payload)
                if ftype == DELTA:
                    if sess.on_delta(r):
                        sess.peer_done = True
                elif ftype == POLICY:
                    sess.on_policy(r)
                elif ftype == ACK:
                    sess.on_ack(r)

    # responder

    def handle(self, data: bytes) -> bytes:
        """Process inbound frames from an initiator; return the reply stream."""
        out = bytearray()
        for ftype, version, payload in iter_frames(data):
            if version != PROTOCOL_VERSION:
                raise DecodeError(f"unsupported protocol version {version}")
            for reply in self._handle_one(ftype, version, payload):
                out += reply
        return bytes(out)

    def _handle_one(self, ftype: int, version: int, payload: bytes) -> list[bytes]:
        if ftype == HELLO:
            r = codec.Reader(payload)
            link_id = r.str()
            r.str()
            r.str()
            mode = r.u8()
            link = self.links.get(link_id)
            if link is None:
                raise AuthFailure(f"no link {link_id!r} configured here")
            report = SyncReport(link_id, link.peer_id)
            sess = _Session(self, link, report, mode)
            sess.on_hello(codec.Reader(payload))
            self._sessions[link_id] = sess
            return [sess.hello()]
        sess, r = self._active_session(ftype, version, payload)
        if ftype == DELTA:
            if sess.on_delta(r):
                return sess.deltas()
            return []
        if ftype == POLICY:
            reply = sess.policy()  # our bundle as it stood, so both sides compare the same pair
            sess.on_policy(r)
            return [reply]
        if ftype == ACK:
            sess.on_ack(r)
            reply = sess.ack()
            self._sessions.pop(sess.link.link_id, None)
            self._finished[sess.link.link_id] = sess.report
            self.db.save_state()
            return [reply]
        raise DecodeError(f"unknown frame type {ftype:#x}")

    def _active_session(self, ftype: int, version: int, payload: bytes) -> tuple[_Session, codec.Reader]:
        # sealed frames do not name their link; try each open session's key
        for sess in self._sessions.values():
            try:
                return sess, sess.open(ftype, version, payload)
            except AuthFailure:
                continue
        raise AuthFailure(f"{FRAME_NAMES.get(ftype, hex(ftype))} frame does not authenticate on any open session")

    def last_report(self, link_id: str) -> Optional[SyncReport]:
        """The responder-side report of the most recent completed round on ``link_id``."""
        return self._finished.pop(link_id, None)

    # persistence / status

    def status(self) -> list[dict]:
        rows = []
        for link_id in sorted(self.links):
            link = self.links[link_id]
            rows.append({
                **link.to_json(),
                "acked_entries": len(link.acked),
                "acked": link.acked.to_json(),
            })
        return rows

    def to_json(self, include_state: bool = False) -> list[dict]:
        return [self.links[k].to_json(include_state) for k in sorted(self.links)]

    def load_json(self, data: list[dict]) -> None:
        for d in data:
            link = SyncLink.from_json(d)
            self.links[link.link_id] = link
            self._round_locks.setdefault(link.link_id, threading.Lock())
