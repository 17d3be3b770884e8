"""Manifest registry: publish, replicate and deploy declarative configuration.

The log lives in the reserved immutable store ``__registry``. Each entry is
one record whose provenance (origin_id, origin_seq) is the publishing tier
and its tier-local sequence, and whose value is the manifest's canonical
JSON. Because it is an ordinary store, the sync machinery replicates it on
every link.

Deployment is an explicit per-tier step. Sections apply in a fixed order so
cross references resolve: policies and roles, model types, stores, model
instances and tags, callbacks, ingest, sync. A failing section is rolled
back on its own; earlier sections stay applied.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Optional, Union

from .errors import (
    ApplyFailure,
    InvalidConfig,
    MicrodbError,
    NotFound,
    StaleVersion,
    ValidationFailure,
)
from .eventbus import STAGES, BUILTINS, builtin_spec
from .infomodel import InfoModel, InstanceDef, ModelCatalog, Tag, TypeDef
from .ingest import IngestBinding
from .security import TIER_KINDS, Interface, Principal, Role, SharingPolicy, tiers_adjacent
from .store import ColumnStoreConfig
from .sync import SyncFilter, SyncLink

if TYPE_CHECKING:
    from .engine import Microdatabase

logger = logging.getLogger(__name__)

TOP_LEVEL_KEYS = (
    "manifest_id", "version", "publisher", "model", "stores", "roles", "policies",
    "bindings", "ingest", "sync", "callbacks",
)
SECTIONS = ("policies", "model-types", "stores", "model-instances", "callbacks", "ingest", "sync")


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class Manifest:
    manifest_id: str
    version: int
    publisher: str
    body: dict = field(compare=False, repr=False)

    @classmethod
    def parse(cls, data: Union[str, bytes, dict]) -> "Manifest":
        if not isinstance(data, dict):
            try:
                data = json.loads(data)
            except json.JSONDecodeError as exc:
                raise ValidationFailure([f"manifest is not valid JSON: {exc}"]) from None
        if not isinstance(data, dict):
            raise ValidationFailure(["manifest must be a JSON object"])
        problems = []
        unknown = sorted(set(data) - set(TOP_LEVEL_KEYS))
        if unknown:
            problems.append(f"unknown top-level keys {unknown}")
        mid = data.get("manifest_id")
        if not isinstance(mid, str) or not mid:
            problems.append("manifest_id must be a non-empty string")
        version = data.get("version")
        if not isinstance(version, int) or isinstance(version, bool) or version < 1:
            problems.append("version must be a positive integer")
        publisher = data.get("publisher", "")
        if not isinstance(publisher, str):
            problems.append("publisher must be a string")
        for key in ("stores", "roles", "policies", "ingest", "sync", "callbacks"):
            if not isinstance(data.get(key, []), list):
                problems.append(f"{key} must be a list")
        if not isinstance(data.get("bindings", {}), dict):
            problems.append("bindings must be an object")
        if problems:
            raise ValidationFailure(problems)
        return cls(mid, version, publisher, data)

    def canonical(self) -> str:
        return canonical_json(self.body)

    def section(self, key: str) -> list:
        return list(self.body.get(key, []))

    def models(self) -> list[dict]:
        m = self.body.get("model")
        if m is None:
            return []
        return list(m) if isinstance(m, list) else [m]


@dataclass(frozen=True, order=True)
class LogEntry:
    tier: str
    seq: int
    manifest: Manifest = field(compare=False)

    def line(self) -> str:
        return f"{self.tier}\t{self.seq}\t{self.manifest.manifest_id}\t{self.manifest.version}\t{self.manifest.publisher}"

    def to_json(self) -> dict:
        return {"tier": self.tier, "seq": self.seq, "manifest_id": self.manifest.manifest_id,
                "version": self.manifest.version, "publisher": self.manifest.publisher}


@dataclass
class SectionResult:
    created: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    error: Optional[str] = None

    def to_json(self) -> dict:
        d = {"created": sorted(self.created), "skipped": sorted(self.skipped)}
        if self.error is not None:
            d["error"] = self.error
        return d


@dataclass
class DeploymentReport:
    manifest_id: str
    version: int
    sections: dict[str, SectionResult] = field(default_factory=dict)
    partial: bool = False
    noop: bool = False

    @property
    def created(self) -> list[str]:
        return [f"{s}:{n}" for s, r in self.sections.items() for n in sorted(r.created)]

    @property
    def skipped(self) -> list[str]:
        return [f"{s}:{n}" for s, r in self.sections.items() for n in sorted(r.skipped)]

    def to_json(self) -> dict:
        return {
            "manifest_id": self.manifest_id,
            "version": self.version,
            "partial": self.partial,
            "noop": self.noop,
            "sections": {k: v.to_json() for k, v in self.sections.items()},
        }


# -- validation ---------------------------------------------------------------


def _try(problems: list[str], where: str, fn: Callable[[], Any]) -> Any:
    try:
        return fn()
    except (MicrodbError, KeyError, TypeError, ValueError) as exc:
        problems.append(f"{where}: {exc}")
        return None


def validate_manifest(manifest: Manifest, db: "Microdatabase") -> list[str]:
    """Itemized problems; empty when every section parses and every reference resolves.

    References may point into the manifest itself or at names already
    present on ``db``.
    """
    problems: list[str] = []
    m = manifest

    policies = {p.get("name") for p in m.section("policies") if isinstance(p, dict)}
    policies |= set(db.security.policy.policies)
    for i, p in enumerate(m.section("policies")):
        _try(problems, f"policies[{i}]", lambda p=p: SharingPolicy.from_json(p))
    roles = set(db.security.policy.roles)
    for i, r in enumerate(m.section("roles")):
        role = _try(problems, f"roles[{i}]", lambda r=r: Role.from_json(r))
        if role is None:
            continue
        roles.add(role.name)
        for g in role.grants:
            if g.policy_ref is not None and g.policy_ref not in policies:
                problems.append(f"roles[{i}] ({role.name}): unknown policy {g.policy_ref!r}")
    for subject, names in m.body.get("bindings", {}).items():
        for n in names if isinstance(names, list) else [names]:
            if n not in roles:
                problems.append(f"bindings[{subject}]: unknown role {n!r}")

    # model: build a scratch catalog holding existing models plus the manifest's
    scratch = ModelCatalog.from_json(db.models.to_json())
    model_defs = m.models()
    for i, md in enumerate(model_defs):
        if not isinstance(md, dict) or not md.get("model_id"):
            problems.append(f"model[{i}]: model_id required")
            continue
        model = scratch.ensure(md["model_id"])
        fresh = []
        for t in md.get("types", []):
            td = _try(problems, f"model {md['model_id']} type", lambda t=t: TypeDef.from_json(md["model_id"], t))
            if td is None:
                continue
            if td.name in model.types:
                if model.types[td.name] != td:
                    problems.append(f"type {md['model_id']}:{td.name} differs from the deployed definition")
                continue
            fresh.append(td)
        if fresh:
            _try(problems, f"model {md['model_id']} types", lambda: model.define_types(fresh))

    stores = set(db.stores)
    for i, s in enumerate(m.section("stores")):
        cfg = _try(problems, f"stores[{i}]", lambda s=s: ColumnStoreConfig.from_json(s))
        if cfg is None:
            continue
        _try(problems, f"stores[{i}]", cfg.validate)
        stores.add(cfg.name)
        if cfg.value_type is not None:
            _try(problems, f"stores[{i}] ({cfg.name}) value_type", lambda: scratch.resolve_type(cfg.value_type))
        if cfg.sharing_policy is not None and cfg.sharing_policy not in policies:
            problems.append(f"stores[{i}] ({cfg.name}): unknown sharing policy {cfg.sharing_policy!r}")

    for i, md in enumerate(model_defs):
        if not isinstance(md, dict) or md.get("model_id") not in scratch.models:
            continue
        model = scratch.models[md["model_id"]]
        for inst in md.get("instances", []):
            where = f"model {model.model_id} instance {inst.get('name')!r}"
            if inst.get("name") in model.instances:
                continue
            _try(problems, where, lambda inst=inst: model.define_instance(
                InstanceDef(model.model_id, inst["name"], inst["type"], inst["store"]), stores.__contains__))
        for t in md.get("tags", []):
            tag = _try(problems, f"model {model.model_id} tag", lambda t=t: Tag(t["label"], t["subject"], t["name"]))
            if tag is not None and tag not in model.tags:
                _try(problems, f"model {model.model_id} tag {tag.label!r}", lambda: model.classify(tag))

    ids = set()
    for i, c in enumerate(m.section("callbacks")):
        if not isinstance(c, dict):
            problems.append(f"callbacks[{i}]: must be an object")
            continue
        if c.get("id") in ids:
            problems.append(f"callbacks[{i}]: duplicate id {c.get('id')!r}")
        ids.add(c.get("id"))
        if c.get("stage") not in STAGES:
            problems.append(f"callbacks[{i}]: unknown stage {c.get('stage')!r}")
        elif c.get("builtin") not in BUILTINS:
            problems.append(f"callbacks[{i}]: unknown built-in {c.get('builtin')!r}")
        else:
            _try(problems, f"callbacks[{i}]", lambda c=c: builtin_spec(c))

    for i, b in enumerate(m.section("ingest")):
        binding = _try(problems, f"ingest[{i}]", lambda b=b: _ingest_binding(b))
        if binding is None:
            continue
        _try(problems, f"ingest[{i}]", binding.validate)
        if binding.store not in stores:
            problems.append(f"ingest[{i}]: unknown store {binding.store!r}")

    for i, s in enumerate(m.section("sync")):
        where = f"sync[{i}]"
        ends = s.get("endpoints") if isinstance(s, dict) else None
        if not isinstance(ends, list) or len(ends) != 2:
            problems.append(f"{where}: endpoints must list exactly two [replica, tier] pairs")
            continue
        if any(not isinstance(e, list) or len(e) != 2 or e[1] not in TIER_KINDS for e in ends):
            problems.append(f"{where}: each endpoint is [replica_id, tier_kind]")
            continue
        if not tiers_adjacent(ends[0][1], ends[1][1]):
            problems.append(f"{where}: tiers {ends[0][1]} and {ends[1][1]} are not adjacent")
        flt = _try(problems, where, lambda s=s: SyncFilter.from_json(s.get("filter", {})))
        if flt is not None:
            for name in flt.explicit_names():
                if name not in stores:
                    problems.append(f"{where}: filter names unknown store {name!r}")
    return problems


def _item_names(m: Manifest, replica_id: str) -> dict[str, list[str]]:
    """Per-section item names as the appliers report them, without applying anything."""
    models = [md for md in m.models() if isinstance(md, dict)]
    return {
        "policies": [f"policy:{p['name']}" for p in m.section("policies")]
        + [f"role:{r['name']}" for r in m.section("roles")]
        + [f"binding:{s}" for s in sorted(m.body.get("bindings", {}))],
        "model-types": [f"{md['model_id']}:{t['name']}" for md in models for t in md.get("types", [])],
        "stores": [s["name"] for s in m.section("stores")],
        "model-instances": [f"{md['model_id']}:{i['name']}" for md in models for i in md.get("instances", [])]
        + [f"{md['model_id']}:{t['subject']}:{t['name']}#{t['label']}" for md in models for t in md.get("tags", [])],
        "callbacks": [c["id"] for c in m.section("callbacks")],
        "ingest": [b["source_id"] for b in m.section("ingest")
                   if b.get("replicas") is None or replica_id in b["replicas"]],
        "sync": [s["link_id"] for s in m.section("sync") if link_for_replica(s, replica_id) is not None],
    }


def _ingest_binding(d: dict) -> IngestBinding:
    return IngestBinding.from_json({k: v for k, v in d.items() if k != "replicas"})


# -- the registry -------------------------------------------------------------


class Registry:
    def __init__(self, db: "Microdatabase"):
        self.db = db
        self.deployed: dict[str, int] = {}

    @property
    def store(self):
        from .engine import REGISTRY_STORE

        return self.db.store(REGISTRY_STORE)

    def log(self) -> list[LogEntry]:
        """All entries, ordered by (tier, seq)."""
        return sorted(LogEntry(r.prov.origin_id, r.prov.origin_seq, Manifest.parse(r.value))
                      for r in self.store.all_records())

    def find(self, manifest_id: str, version: int) -> Manifest:
        for e in self.log():
            if e.manifest.manifest_id == manifest_id and e.manifest.version == version:
                return e.manifest
        raise NotFound(f"manifest {manifest_id!r} version {version} is not in the registry log")

    def publish(self, manifest: Union[Manifest, dict, str], principal: Optional[Principal] = None) -> LogEntry:
        from .engine import REGISTRY_STORE, SYSTEM

        principal = principal or SYSTEM
        self.db.require(principal, Interface.ADMIN, "*")
        if not isinstance(manifest, Manifest):
            manifest = Manifest.parse(manifest)
        if not manifest.publisher:
            body = dict(manifest.body, publisher=principal.subject)
            manifest = Manifest(manifest.manifest_id, manifest.version, principal.subject, body)
        problems = validate_manifest(manifest, self.db)
        if problems:
            raise ValidationFailure(problems)
        with self.store.lock:
            newest = max((e.manifest.version for e in self.log()
                          if e.manifest.manifest_id == manifest.manifest_id), default=0)
            if manifest.version <= newest:
                raise StaleVersion(f"{manifest.manifest_id!r} version {manifest.version} is not above {newest}")
            receipt = self.db.append(REGISTRY_STORE, self.db.clock(), manifest.canonical(), SYSTEM,
                                     actor=principal.subject, stage=None)
        return LogEntry(receipt.prov.origin_id, receipt.prov.origin_seq, manifest)

    def deploy(self, manifest_id: str, version: int, principal: Optional[Principal] = None) -> DeploymentReport:
        from .engine import SYSTEM

        principal = principal or SYSTEM
        self.db.require(principal, Interface.ADMIN, "*")
        manifest = self.find(manifest_id, version)
        report = DeploymentReport(manifest_id, version)
        if self.deployed.get(manifest_id, 0) >= version:
            report.noop = True
            for section, names in _item_names(manifest, self.db.replica_id).items():
                report.sections[section] = SectionResult(skipped=names)
            return report
        problems = validate_manifest(manifest, self.db)
        if problems:
            raise ValidationFailure(problems)
        with self.db._admin:
            for section in SECTIONS:
                result = report.sections[section] = SectionResult()
                snapshot = self._snapshot()
                undo: list[Callable[[], None]] = []
                try:
                    getattr(self, "_apply_" + section.replace("-", "_"))(manifest, result, undo)
                except (MicrodbError, KeyError, TypeError, ValueError) as exc:
                    result.error = str(exc)
                    report.partial = True
                    for fn in reversed(undo):
                        fn()
                    self._restore(snapshot, section)
                    self.db.save_state()
                    err = ApplyFailure(f"section {section} failed: {exc}", report=report)
                    raise err from exc
            self.deployed[manifest_id] = version
            self.db.save_state()
        return report

    # -- section appliers -----------------------------------------------

    def _snapshot(self) -> dict:
        return {"policy": self.db.security.policy, "models": self.db.models.to_json()}

    def _restore(self, snap: dict, section: str) -> None:
        if section == "policies":
            self.db.security._swap(snap["policy"])
        if section.startswith("model-"):
            self.db.models = ModelCatalog.from_json(snap["models"])

    def _apply_policies(self, m: Manifest, result: SectionResult, undo: list) -> None:
        sec = self.db.security
        for d in m.section("policies"):
            p = SharingPolicy.from_json(d)
            if sec.policy.policies.get(p.name) == p:
                result.skipped.append(f"policy:{p.name}")
            else:
                sec.define_policy(p)
                result.created.append(f"policy:{p.name}")
        for d in m.section("roles"):
            r = Role.from_json(d)
            if sec.policy.roles.get(r.name) == r:
                result.skipped.append(f"role:{r.name}")
            else:
                sec.define_role(r)
                result.created.append(f"role:{r.name}")
        for subject, names in sorted(m.body.get("bindings", {}).items()):
            names = tuple(names) if isinstance(names, list) else (names,)
            if sec.roles_of(subject) == names:
                result.skipped.append(f"binding:{subject}")
            else:
                sec.provision(subject, names)
                result.created.append(f"binding:{subject}")

    def _apply_model_types(self, m: Manifest, result: SectionResult, undo: list) -> None:
        for md in m.models():
            model = self.db.models.ensure(md["model_id"])
            fresh = []
            for t in md.get("types", []):
                td = TypeDef.from_json(model.model_id, t)
                if td.name in model.types:
                    if model.types[td.name] != td:
                        raise InvalidConfig(f"type {model.model_id}:{td.name} cannot change once defined")
                    result.skipped.append(f"{model.model_id}:{td.name}")
                else:
                    fresh.append(td)
            model.define_types(fresh)
            result.created.extend(f"{model.model_id}:{td.name}" for td in fresh)

    def _apply_stores(self, m: Manifest, result: SectionResult, undo: list) -> None:
        for d in m.section("stores"):
            cfg = ColumnStoreConfig.from_json(d)
            existing = self.db.stores.get(cfg.name)
            if existing is not None:
                if existing.config != cfg:
                    raise InvalidConfig(f"store {cfg.name!r} exists with a different configuration")
                result.skipped.append(cfg.name)
                continue
            self.db.create_store(cfg)
            undo.append(lambda n=cfg.name: self.db.drop_store(n))
            result.created.append(cfg.name)

    def _apply_model_instances(self, m: Manifest, result: SectionResult, undo: list) -> None:
        for md in m.models():
            model: InfoModel = self.db.models.ensure(md["model_id"])
            for d in md.get("instances", []):
                inst = InstanceDef(model.model_id, d["name"], d["type"], d["store"])
                if model.instances.get(inst.name) == inst:
                    result.skipped.append(f"{model.model_id}:{inst.name}")
                    continue
                model.define_instance(inst, lambda s: s in self.db.stores)
                result.created.append(f"{model.model_id}:{inst.name}")
            for d in md.get("tags", []):
                tag = Tag(d["label"], d["subject"], d["name"])
                name = f"{model.model_id}:{tag.subject}:{tag.name}#{tag.label}"
                if tag in model.tags:
                    result.skipped.append(name)
                    continue
                model.classify(tag)
                result.created.append(name)

    def _apply_callbacks(self, m: Manifest, result: SectionResult, undo: list) -> None:
        current = {s.id: s for s in self.db.callbacks.specs()}
        for d in m.section("callbacks"):
            spec = builtin_spec(d)
            old = current.get(spec.id)
            if old is not None:
                if old.declaration != spec.declaration:
                    raise InvalidConfig(f"callback {spec.id!r} already registered with a different declaration")
                result.skipped.append(spec.id)
                continue
            self.db.register_callback(spec)
            undo.append(lambda i=spec.id: self.db.callbacks.unregister(i))
            result.created.append(spec.id)

    def _apply_ingest(self, m: Manifest, result: SectionResult, undo: list) -> None:
        for d in m.section("ingest"):
            replicas = d.get("replicas")
            if replicas is not None and self.db.replica_id not in replicas:
                continue
            b = _ingest_binding(d)
            existing = self.db.ingest.bindings.get(b.store)
            if existing is not None:
                if existing != b:
                    raise InvalidConfig(f"store {b.store!r} already has a different ingest binding")
                result.skipped.append(b.source_id)
                continue
            self.db.ingest.bind(b)
            undo.append(lambda s=b.store: self.db.ingest.unbind(s))
            result.created.append(b.source_id)

    def _apply_sync(self, m: Manifest, result: SectionResult, undo: list) -> None:
        for d in m.section("sync"):
            link = link_for_replica(d, self.db.replica_id)
            if link is None:
                continue
            existing = self.db.sync.links.get(link.link_id)
            if existing is not None and existing.to_json() == link.to_json() and existing.key == link.key:
                result.skipped.append(link.link_id)
                continue
            self.db.sync.configure_link(link)
            if existing is None:
                undo.append(lambda i=link.link_id: self.db.sync.remove_link(i))
            result.created.append(link.link_id)


def link_for_replica(decl: dict, replica_id: str) -> Optional[SyncLink]:
    """The SyncLink a manifest sync declaration defines for ``replica_id`` (None if not an endpoint)."""
    ends = decl["endpoints"]
    peers = [e for e in ends if e[0] != replica_id]
    if len(peers) != 1:
        return None
    peer_id, peer_tier = peers[0]
    key = decl.get("key")
    return SyncLink(
        decl["link_id"],
        peer_id,
        peer_tier,
        SyncFilter.from_json(decl.get("filter", {})),
        decl.get("period_ms"),
        bytes.fromhex(key) if key else None,
    )
