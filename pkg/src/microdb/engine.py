"""The microdatabase: one tier-local data vault.

``Microdatabase`` owns the column stores and mediates every access through
the security domain, the callback pipeline and the event bus. Ingest,
synchronization and the manifest registry hang off it as managers
(``db.ingest``, ``db.sync``, ``db.registry``).
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Union

from . import codec
from .errors import (
    DuplicateName,
    ImmutableStore,
    InvalidConfig,
    NotFound,
    RejectedByCallback,
    SchemaViolation,
    Unauthorized,
    UnauthorizedRange,
)
from .eventbus import CallbackRegistry, CallbackSpec, EventBus, EventFilter, Subscription, builtin_spec
from .infomodel import InstanceDef, ModelCatalog, Node, Tag, TypeDef
from .records import KeyRange, Op, Provenance, Record, RecordKey
from .security import (
    TIER_KINDS,
    AesGcmProvider,
    CryptoProvider,
    Interface,
    Principal,
    Role,
    SecurityDomain,
    SharingPolicy,
    derive_key,
    issue_token,
    unwrap_key,
    wrap_key,
)
from .store import ColumnStore, ColumnStoreConfig, Sealer

logger = logging.getLogger(__name__)

REGISTRY_STORE = "__registry"
SYSTEM = Principal("__system__", "local")
TOKEN_ISSUER = "registry"
DATA_DIR_ENV = "MICRODB_DATA_DIR"


def wall_clock() -> int:
    return time.time_ns()


@dataclass(frozen=True)
class Receipt:
    store: str
    key: RecordKey
    prov: Provenance
    event_seq: int

    def to_json(self) -> dict:
        return {
            "store": self.store,
            "key": [self.key.ts, self.key.seq],
            "origin_id": self.prov.origin_id,
            "origin_seq": self.prov.origin_seq,
            "write_ts": self.prov.write_ts,
            "event_seq": self.event_seq,
        }


class Microdatabase:
    """A tier-local microdatabase instance.

    ``data_dir=None`` keeps everything in memory (the simulator does this);
    otherwise stores live under ``<data_dir>/<db_id>/``. ``clock`` returns
    integer nanoseconds and is the only time source the engine reads.
    """

    def __init__(
        self,
        replica_id: str,
        tier_kind: str = "local",
        data_dir: Union[str, Path, None] = None,
        db_id: Optional[str] = None,
        owner: str = "owner",
        owner_key: Optional[bytes] = None,
        clock: Optional[Callable[[], int]] = None,
        crypto: Optional[CryptoProvider] = None,
        fsync: bool = False,
    ):
        if not replica_id:
            raise InvalidConfig("replica id must be non-empty")
        if tier_kind not in TIER_KINDS:
            raise InvalidConfig(f"unknown tier kind {tier_kind!r}")
        self.replica_id = replica_id
        self.tier_kind = tier_kind
        self.db_id = db_id or replica_id
        self.owner = owner
        self.clock = clock or wall_clock
        self.crypto = crypto or AesGcmProvider()
        self.fsync = fsync
        self.dir: Optional[Path] = None
        if data_dir is not None:
            self.dir = Path(data_dir) / self.db_id
            self.dir.mkdir(parents=True, exist_ok=True)
        self.owner_key = owner_key or self._load_owner_key()

        self._admin = threading.RLock()
        self._loading = False
        self.security = SecurityDomain(
            {TOKEN_ISSUER: derive_key(self.owner_key, "microdb-token")}, self.clock, self.save_state
        )
        self.models = ModelCatalog()
        self.bus = EventBus(self.clock)
        self.callbacks = CallbackRegistry()
        self.stores: dict[str, ColumnStore] = {}
        self._mem_keys: dict[str, bytes] = {}  # wrapped data keys when running without a data dir

        from .ingest import IngestManager
        from .registry import Registry
        from .sync import SyncManager

        self.ingest = IngestManager(self)
        self.sync = SyncManager(self)
        self.registry = Registry(self)

        self._open_store(ColumnStoreConfig(REGISTRY_STORE), reserved=True)
        if self.dir is not None:
            self._load_state()

    # -- key material / tokens -----------------------------------------

    def _load_owner_key(self) -> bytes:
        if self.dir is None:
            return os.urandom(32)
        path = self.dir / "owner.key"
        if path.exists():
            return bytes.fromhex(path.read_text().strip())
        key = os.urandom(32)
        path.write_text(key.hex())
        os.chmod(path, 0o600)
        return key

    def issue_token(self, subject: str, ttl_ns: int = 24 * 3600 * 10**9) -> bytes:
        return issue_token(subject, TOKEN_ISSUER, self.clock() + ttl_ns, self.security.trusted_keys[TOKEN_ISSUER])

    def authenticate(self, token: Union[bytes, str]) -> Principal:
        return self.security.authenticate(token)

    def link_key(self, link_id: str) -> bytes:
        return derive_key(self.owner_key, f"microdb-link:{link_id}")

    # -- authorization helpers -----------------------------------------

    def is_owner(self, principal: Principal) -> bool:
        return principal is SYSTEM or principal.subject == self.owner

    def require(self, principal: Principal, interface: Interface, store: str,
                request: Optional[KeyRange] = None, range_error: bool = False) -> None:
        if self.is_owner(principal):
            return
        decision = self.security.authorize(principal, interface, store, request)
        if decision:
            return
        if range_error and self.security.authorize(principal, interface, store, request, ignore_range=True):
            raise UnauthorizedRange(f"{principal.subject}: requested range {request} exceeds grant on {store!r}")
        raise Unauthorized(f"{principal.subject}: {decision.reason}")

    def roles_of(self, principal: Principal) -> tuple[str, ...]:
        return self.security.roles_of(principal.subject)

    # -- stores --------------------------------------------------------

    def _open_store(self, config: ColumnStoreConfig, reserved: bool = False) -> ColumnStore:
        sealer = None
        path = None
        if self.dir is not None:
            path = self.dir / f"{config.name}.log"
        if config.encrypted:
            sealer = Sealer(self.crypto, self._data_key(config.name))
        store = ColumnStore(config, self.replica_id, path, sealer, self.fsync)
        self.stores[config.name] = store
        return store

    def _data_key(self, name: str) -> bytes:
        """Per-store data key, persisted wrapped under the owner key."""
        wrapped_path = self.dir / f"{name}.key" if self.dir is not None else None
        if wrapped_path is not None and wrapped_path.exists():
            return unwrap_key(self.owner_key, bytes.fromhex(wrapped_path.read_text().strip()))
        if wrapped_path is None and name in self._mem_keys:
            return unwrap_key(self.owner_key, self._mem_keys[name])
        key = os.urandom(32)
        wrapped = wrap_key(self.owner_key, key)
        if wrapped_path is not None:
            wrapped_path.write_text(wrapped.hex())
        else:
            self._mem_keys[name] = wrapped
        return key

    def store(self, name: str) -> ColumnStore:
        try:
            return self.stores[name]
        except KeyError:
            raise NotFound(f"no store {name!r}") from None

    def user_stores(self) -> list[str]:
        return sorted(n for n in self.stores if n != REGISTRY_STORE)

    def create_store(self, config: ColumnStoreConfig, principal: Principal = SYSTEM) -> ColumnStore:
        self.require(principal, Interface.ADMIN, config.name)
        config.validate()
        with self._admin:
            if config.name in self.stores:
                raise DuplicateName(f"store {config.name!r} already exists")
            if config.value_type is not None:
                self.models.resolve_type(config.value_type)
            if config.sharing_policy is not None and config.sharing_policy not in self.security.policy.policies:
                raise InvalidConfig(f"unknown sharing policy {config.sharing_policy!r}")
            if self.dir is not None:
                for suffix in (".log", ".key"):
                    stale = self.dir / f"{config.name}{suffix}"
                    if stale.exists():
                        stale.unlink()
            store = self._open_store(config)
            self.bus.emit("create-store", config.name, None, principal.subject)
            self.save_state()
            return store

    def drop_store(self, name: str, principal: Principal = SYSTEM) -> None:
        self.require(principal, Interface.ADMIN, name)
        with self._admin:
            if name == REGISTRY_STORE:
                raise InvalidConfig("the registry store cannot be dropped")
            store = self.store(name)
            store.close()
            del self.stores[name]
            if self.dir is not None:
                for suffix in (".log", ".key"):
                    p = self.dir / f"{name}{suffix}"
                    if p.exists():
                        p.unlink()
            else:
                self._mem_keys.pop(name, None)
            self.ingest.forget_store(name)
            self.sync.discard_store(name)
            self.bus.emit("delete-store", name, None, principal.subject)
            self.save_state()

    # -- data exchange -------------------------------------------------

    def _check_value(self, store: ColumnStore, value: Any) -> None:
        if value is None:
            raise SchemaViolation("value must not be null")
        try:
            codec.check_value(value)
        except ValueError as exc:
            raise SchemaViolation(str(exc)) from None
        if store.config.value_type is not None:
            try:
                self.models.validate(store.config.value_type, value)
            except InvalidConfig as exc:
                raise SchemaViolation(str(exc)) from None

    def append(self, store_name: str, key: Union[int, RecordKey], value: Any,
               principal: Principal = SYSTEM, actor: Optional[str] = None,
               stage: Optional[str] = "exchange") -> Receipt:
        """Create one record. ``key`` may be a bare timestamp; seq is allocated.

        ``stage`` names the callback chain to run; ``None`` skips callbacks
        (the ingest path runs its own chain before calling in).
        """
        store = self.store(store_name)
        if store_name == REGISTRY_STORE and principal is not SYSTEM:
            raise Unauthorized("the registry store is written only through publish")
        ts = key.ts if isinstance(key, RecordKey) else int(key)
        with store.lock:
            rkey = store.next_key(ts)
            self.require(principal, Interface.EXCHANGE_CREATE, store_name, KeyRange.point(rkey))
            self._check_value(store, value)
            write_ts = self.clock()
            if stage is not None:
                draft = Record(rkey, value, Provenance(self.replica_id, 0, write_ts), Op.CREATE)
                result = self.callbacks.run_chain(stage, store_name, draft, self.roles_of(principal))
                if not result.accepted:
                    raise RejectedByCallback(result.rejected_by, result.reason)
                value = result.record.value
                self._check_value(store, value)
            rec = store.commit_local(rkey, value, Op.CREATE, write_ts)
            ev = self.bus.emit("create", store_name, rkey, actor or principal.subject)
        return Receipt(store_name, rec.key, rec.prov, ev.event_seq)

    def read_range(self, store_name: str, lo: Optional[RecordKey] = None, hi: Optional[RecordKey] = None,
                   limit: Optional[int] = None, principal: Principal = SYSTEM) -> list[Record]:
        store = self.store(store_name)
        request = KeyRange(lo, hi) if lo is None or hi is None or lo < hi else None
        if request is None:
            return []
        self.require(principal, Interface.EXCHANGE_READ, store_name, request, range_error=True)
        return store.read_range(lo, hi, limit)

    def mutate(self, store_name: str, key: RecordKey, value: Any = None, principal: Principal = SYSTEM,
               delete: bool = False) -> Receipt:
        """Update (or, with ``delete=True``, tombstone) an existing record."""
        store = self.store(store_name)
        if not store.mutable:
            raise ImmutableStore(f"store {store_name!r} is immutable")
        iface = Interface.EXCHANGE_DELETE if delete else Interface.EXCHANGE_UPDATE
        self.require(principal, iface, store_name, KeyRange.point(key))
        with store.lock:
            if not delete:
                self._check_value(store, value)
                cur = store.get(key)
                prov = cur.prov if cur is not None else Provenance(self.replica_id, 0, self.clock())
                draft = Record(key, value, prov, Op.UPDATE)
                result = self.callbacks.run_chain("exchange", store_name, draft, self.roles_of(principal))
                if not result.accepted:
                    raise RejectedByCallback(result.rejected_by, result.reason)
                value = result.record.value
                self._check_value(store, value)
            rec = store.mutate(key, value, self.clock(), delete=delete)
            ev = self.bus.emit(rec.op.txn, store_name, key, principal.subject)
        return Receipt(store_name, rec.key, rec.prov, ev.event_seq)

    def delete(self, store_name: str, key: RecordKey, principal: Principal = SYSTEM) -> Receipt:
        return self.mutate(store_name, key, principal=principal, delete=True)

    def content_hash(self, store_name: str, key_range: Optional[KeyRange] = None) -> bytes:
        return self.store(store_name).content_hash(key_range)

    def apply_replicated(self, store_name: str, rec: Record) -> str:
        """Commit a record received from a peer. Returns committed/duplicate/rejected."""
        store = self.store(store_name)
        with store.lock:
            if store.has(rec.prov.origin_id, rec.prov.origin_seq):
                store.stats.duplicates += 1
                return "duplicate"
            if store_name != REGISTRY_STORE:
                result = self.callbacks.run_chain("sync-in", store_name, rec)
                if not result.accepted:
                    store.mark_seen(rec.prov.origin_id, rec.prov.origin_seq)
                    return "rejected"
                rec = result.record
            res = store.apply_remote(rec)
            if res.conflict:
                logger.warning("%s: conflicting write at %s in immutable store %r (origin %s)",
                               self.replica_id, rec.key, store_name, rec.prov.origin_id)
            self.bus.emit(rec.op.txn, store_name, rec.key, f"sync:{rec.prov.origin_id}")
        return "conflict" if res.conflict else "committed"

    # -- eventing ------------------------------------------------------

    def subscribe(self, flt: EventFilter, principal: Principal = SYSTEM, capacity: int = 1024) -> Subscription:
        self.require(principal, Interface.SUBSCRIBE, flt.store, flt.range)
        return self.bus.subscribe(flt, principal.subject, capacity)

    def unsubscribe(self, sub_id: str, principal: Principal = SYSTEM) -> None:
        sub = self.bus.get(sub_id)
        if not self.is_owner(principal) and sub.subject != principal.subject:
            raise Unauthorized(f"{principal.subject} does not own {sub_id}")
        self.bus.unsubscribe(sub_id)

    def register_callback(self, spec: CallbackSpec, principal: Principal = SYSTEM) -> None:
        self.require(principal, Interface.ADMIN, spec.store)
        with self._admin:
            self.callbacks.register(spec)
            self.save_state()

    # -- information model ---------------------------------------------

    def define_types(self, defs: Iterable[TypeDef], principal: Principal = SYSTEM) -> None:
        self.require(principal, Interface.ADMIN, "*")
        defs = list(defs)
        with self._admin:
            by_model: dict[str, list[TypeDef]] = {}
            for td in defs:
                by_model.setdefault(td.model_id, []).append(td)
            for mid, batch in by_model.items():
                self.models.ensure(mid).define_types(batch)
            self.save_state()

    def define_type(self, td: TypeDef, principal: Principal = SYSTEM) -> None:
        self.define_types([td], principal)

    def define_instance(self, inst: InstanceDef, principal: Principal = SYSTEM) -> None:
        self.require(principal, Interface.ADMIN, inst.store)
        with self._admin:
            self.models.ensure(inst.model_id).define_instance(inst, lambda s: s in self.stores)
            self.save_state()

    def classify(self, model_id: str, tag: Tag, principal: Principal = SYSTEM) -> None:
        self.require(principal, Interface.ADMIN, "*")
        with self._admin:
            self.models.get(model_id).classify(tag)
            self.save_state()

    def unclassify(self, model_id: str, tag: Tag, principal: Principal = SYSTEM) -> None:
        self.require(principal, Interface.ADMIN, "*")
        with self._admin:
            self.models.get(model_id).unclassify(tag)
            self.save_state()

    def browse(self, path: str, tag: Optional[str] = None, model_id: Optional[str] = None) -> list[Node]:
        return self.models.browse(path, tag, model_id)

    def federate(self, model_ids: Iterable[str]):
        return self.models.federate(model_ids)

    # -- security admin ------------------------------------------------

    def define_role(self, role: Role, principal: Principal = SYSTEM) -> None:
        self.require(principal, Interface.ADMIN, "*")
        self.security.define_role(role)

    def provision(self, subject: str, roles: Union[str, Iterable[str]], principal: Principal = SYSTEM,
                  extend: bool = False) -> None:
        self.require(principal, Interface.ADMIN, "*")
        self.security.provision(subject, roles, extend=extend)

    def define_policy(self, policy: SharingPolicy, principal: Principal = SYSTEM) -> None:
        self.require(principal, Interface.ADMIN, "*")
        self.security.define_policy(policy)

    def store_policy(self, store_name: str) -> Optional[SharingPolicy]:
        name = self.store(store_name).config.sharing_policy
        if name is None:
            return None
        return self.security.policy.policies.get(name)

    # -- state ---------------------------------------------------------

    def config_dump(self, include_links: bool = True) -> dict:
        """Deterministic description of all configuration (no record data)."""
        dump = {
            "stores": [self.stores[n].config.to_json() for n in self.user_stores()],
            "policy": self.security.policy.to_json(),
            "models": self.models.to_json(),
            "callbacks": sorted(
                (s.declaration for s in self.callbacks.specs() if s.declaration is not None),
                key=lambda d: d["id"],
            ),
            "ingest": self.ingest.to_json(),
            "deployed": dict(sorted(self.registry.deployed.items())),
        }
        if include_links:
            dump["links"] = self.sync.to_json(include_state=False)
        return dump

    def status(self) -> dict:
        out = {}
        for name in self.user_stores():
            st = self.stores[name]
            out[name] = {
                "records": len(st),
                "mutability": st.config.mutability.value,
                "encrypted": st.config.encrypted,
                "hash": st.content_hash().hex(),
                "conflicts": st.stats.conflicts,
            }
        return out

    def save_state(self) -> None:
        if self.dir is None or self._loading:
            return
        state = self.config_dump()
        state["sync"] = self.sync.to_json(include_state=True)
        state["ingest_state"] = self.ingest.state_json()
        state["replica_id"] = self.replica_id
        state["tier_kind"] = self.tier_kind
        tmp = self.dir / "state.json.tmp"
        tmp.write_text(json.dumps(state, indent=1, sort_keys=True))
        os.replace(tmp, self.dir / "state.json")

    def _load_state(self) -> None:
        path = self.dir / "state.json"
        if not path.exists():
            return
        state = json.loads(path.read_text())
        from .security import PolicySet

        self._loading = True
        try:
            self.security._policy = PolicySet.from_json(state.get("policy", {}))
            self.models = ModelCatalog.from_json(state.get("models", []))
            for cfg in state.get("stores", []):
                self._open_store(ColumnStoreConfig.from_json(cfg))
            for decl in state.get("callbacks", []):
                self.callbacks.register(builtin_spec(decl))
            self.ingest.load_json(state.get("ingest", []), state.get("ingest_state", {}))
            self.sync.load_json(state.get("sync", []))
            self.registry.deployed.update(state.get("deployed", {}))
        finally:
            self._loading = False

    def close(self) -> None:
        for st in self.stores.values():
            st.close()

