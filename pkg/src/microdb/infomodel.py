"""Per-microdatabase type system, classification tags and browse surface.

Each model owns its types, instances and tags. Tags on a type are not
copied onto instances; they are resolved at query time by walking the
instance's type and its ancestors. Federation is a namespace union: every
qualified name in a federated view is prefixed with ``<model_id>:``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Optional

from .errors import (
    BadPath,
    CyclicInheritance,
    Duplicate,
    DuplicateTag,
    InvalidConfig,
    SchemaViolation,
    UnknownModel,
    UnknownParent,
    UnknownSubject,
)

KINDS = ("bool", "int", "float", "str", "bytes", "object")
SUBJECT_KINDS = ("type", "property", "instance")
MAX_TAG_LEN = 128


@dataclass(frozen=True)
class PropertyDef:
    name: str
    kind: str
    unit: Optional[str] = None
    type_ref: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidConfig(f"property {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "object" and not self.type_ref:
            raise InvalidConfig(f"property {self.name!r}: object properties need a type_ref")

    def to_json(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.unit is not None:
            d["unit"] = self.unit
        if self.type_ref is not None:
            d["type_ref"] = self.type_ref
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PropertyDef":
        return cls(d["name"], d["kind"], d.get("unit"), d.get("type_ref"))


@dataclass(frozen=True)
class TypeDef:
    model_id: str
    name: str
    properties: tuple[PropertyDef, ...] = ()
    parent: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "properties", tuple(self.properties))

    def to_json(self) -> dict:
        return {"name": self.name, "parent": self.parent, "properties": [p.to_json() for p in self.properties]}

    @classmethod
    def from_json(cls, model_id: str, d: dict) -> "TypeDef":
        return cls(model_id, d["name"], tuple(PropertyDef.from_json(p) for p in d.get("properties", [])),
                   d.get("parent"))


@dataclass(frozen=True)
class InstanceDef:
    model_id: str
    name: str
    type: str
    store: str

    def to_json(self) -> dict:
        return {"name": self.name, "type": self.type, "store": self.store}


@dataclass(frozen=True, order=True)
class Tag:
    label: str
    subject: str  # one of SUBJECT_KINDS
    name: str  # type name, "Type.prop", or instance name

    def __post_init__(self):
        if self.subject not in SUBJECT_KINDS:
            raise UnknownSubject(f"unknown tag subject kind {self.subject!r}")
        if not self.label or len(self.label) > MAX_TAG_LEN:
            raise InvalidConfig(f"tag label must be 1..{MAX_TAG_LEN} characters")

    def to_json(self) -> dict:
        return {"label": self.label, "subject": self.subject, "name": self.name}


@dataclass(frozen=True)
class Node:
    kind: str
    name: str
    tags: tuple[str, ...] = ()

    def line(self) -> str:
        return f"{self.kind}\t{self.name}\t{','.join(self.tags)}"

    def to_json(self) -> dict:
        return {"kind": self.kind, "name": self.name, "tags": list(self.tags)}


class InfoModel:
    def __init__(self, model_id: str):
        self.model_id = model_id
        self.types: dict[str, TypeDef] = {}
        self.instances: dict[str, InstanceDef] = {}
        self.tags: set[Tag] = set()

    # -- definition ----------------------------------------------------

    def define_types(self, defs: Iterable[TypeDef]) -> None:
        """Define a batch of types atomically; parents may refer within the batch."""
        defs = list(defs)
        batch: dict[str, TypeDef] = {}
        for td in defs:
            if td.name in self.types or td.name in batch:
                raise Duplicate(f"type {self.model_id}:{td.name} already defined")
            batch[td.name] = td
        merged = {**self.types, **batch}
        for td in defs:
            if td.parent is not None and td.parent not in merged:
                raise UnknownParent(f"type {td.name!r} extends unknown type {td.parent!r}")
        for td in defs:
            seen = {td.name}
            cur = td.parent
            while cur is not None:
                if cur in seen:
                    raise CyclicInheritance(f"inheritance cycle through {td.name!r}")
                seen.add(cur)
                cur = merged[cur].parent
        for td in defs:
            names: set[str] = set()
            for _, prop in _closure(merged, td.name):
                if prop.name in names:
                    raise Duplicate(f"type {td.name!r}: property {prop.name!r} defined twice in hierarchy")
                names.add(prop.name)
            for prop in td.properties:
                if prop.kind == "object" and prop.type_ref not in merged:
                    raise UnknownParent(f"property {td.name}.{prop.name} references unknown type {prop.type_ref!r}")
        self.types.update(batch)

    def define_instance(self, inst: InstanceDef, store_exists: Callable[[str], bool]) -> None:
        if inst.name in self.instances:
            raise Duplicate(f"instance {self.model_id}:{inst.name} already defined")
        if inst.type not in self.types:
            raise UnknownSubject(f"instance {inst.name!r} has unknown type {inst.type!r}")
        if not store_exists(inst.store):
            raise UnknownSubject(f"instance {inst.name!r} binds unknown store {inst.store!r}")
        self.instances[inst.name] = inst

    def _subject_exists(self, tag: Tag) -> bool:
        if tag.subject == "type":
            return tag.name in self.types
        if tag.subject == "instance":
            return tag.name in self.instances
        tname, _, pname = tag.name.partition(".")
        td = self.types.get(tname)
        return td is not None and any(p.name == pname for p in td.properties)

    def classify(self, tag: Tag) -> None:
        if not self._subject_exists(tag):
            raise UnknownSubject(f"no {tag.subject} named {tag.name!r} in model {self.model_id!r}")
        if tag in self.tags:
            raise DuplicateTag(f"{tag.subject} {tag.name!r} already tagged {tag.label!r}")
        self.tags.add(tag)

    def unclassify(self, tag: Tag) -> None:
        if tag not in self.tags:
            raise UnknownSubject(f"{tag.subject} {tag.name!r} is not tagged {tag.label!r}")
        self.tags.discard(tag)

    # -- queries -------------------------------------------------------

    def ancestors(self, type_name: str) -> list[str]:
        """The type followed by its ancestors, nearest first."""
        chain = []
        cur: Optional[str] = type_name
        while cur is not None:
            chain.append(cur)
            cur = self.types[cur].parent
        return chain

    def properties(self, type_name: str) -> list[tuple[str, PropertyDef]]:
        return _closure(self.types, type_name)

    def _labels(self, subject: str, name: str) -> set[str]:
        return {t.label for t in self.tags if t.subject == subject and t.name == name}

    def instance_tags(self, name: str) -> set[str]:
        inst = self.instances[name]
        labels = self._labels("instance", name)
        for tname in self.ancestors(inst.type):
            labels |= self._labels("type", tname)
        return labels

    def store_tags(self, store: str) -> set[str]:
        labels: set[str] = set()
        for inst in self.instances.values():
            if inst.store == store:
                labels |= self.instance_tags(inst.name)
        return labels

    def validate(self, type_name: str, value: Any) -> None:
        """Raise SchemaViolation unless ``value`` is an object matching ``type_name``."""
        if type_name not in self.types:
            raise SchemaViolation(f"unknown type {type_name!r}")
        if not isinstance(value, dict):
            raise SchemaViolation(f"{type_name}: expected object, got {type(value).__name__}")
        props = {p.name: p for _, p in self.properties(type_name)}
        extra = set(value) - set(props)
        if extra:
            raise SchemaViolation(f"{type_name}: unknown fields {sorted(extra)}")
        missing = set(props) - set(value)
        if missing:
            raise SchemaViolation(f"{type_name}: missing fields {sorted(missing)}")
        for name, prop in props.items():
            _check_kind(self, f"{type_name}.{name}", prop, value[name])

    def browse(self, path: str, tag: Optional[str] = None, prefix: str = "") -> list[Node]:
        nodes = self._browse(path, prefix)
        if tag is not None:
            nodes = [n for n in nodes if tag in n.tags]
        return sorted(nodes, key=lambda n: (n.name, n.kind))

    def _browse(self, path: str, prefix: str) -> list[Node]:
        parts = path.strip("/").split("/") if path.strip("/") else []
        if path[:1] != "/" or not parts:
            raise BadPath(f"bad browse path {path!r}")
        if parts == ["models"]:
            return [Node("model", self.model_id)]
        if parts == ["types"]:
            return [Node("type", prefix + n, tuple(sorted(self._labels("type", n)))) for n in self.types]
        if parts == ["instances"]:
            return [Node("instance", prefix + n, tuple(sorted(self.instance_tags(n)))) for n in self.instances]
        if len(parts) == 2 and parts[0] == "types":
            name = _unprefix(parts[1], prefix)
            if name not in self.types:
                raise BadPath(f"no type {parts[1]!r}")
            out = []
            for owner, prop in self.properties(name):
                labels = tuple(sorted(self._labels("property", f"{owner}.{prop.name}")))
                out.append(Node("property", f"{prefix}{name}.{prop.name}", labels))
            return out
        if len(parts) == 2 and parts[0] == "instances":
            name = _unprefix(parts[1], prefix)
            inst = self.instances.get(name)
            if inst is None:
                raise BadPath(f"no instance {parts[1]!r}")
            return [
                Node("type", prefix + inst.type, tuple(sorted(self._labels("type", inst.type)))),
                Node("store", inst.store),
            ]
        raise BadPath(f"bad browse path {path!r}")

    # -- persistence ---------------------------------------------------

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "types": [self.types[n].to_json() for n in sorted(self.types)],
            "instances": [self.instances[n].to_json() for n in sorted(self.instances)],
            "tags": [t.to_json() for t in sorted(self.tags)],
        }

    @classmethod
    def from_json(cls, d: dict) -> "InfoModel":
        m = cls(d["model_id"])
        m.types = {t["name"]: TypeDef.from_json(m.model_id, t) for t in d.get("types", [])}
        m.instances = {
            i["name"]: InstanceDef(m.model_id, i["name"], i["type"], i["store"]) for i in d.get("instances", [])
        }
        m.tags = {Tag(t["label"], t["subject"], t["name"]) for t in d.get("tags", [])}
        return m


def _closure(types: dict[str, TypeDef], name: str) -> list[tuple[str, PropertyDef]]:
    """Properties of ``name`` including inherited ones, root ancestor first."""
    chain = []
    cur: Optional[str] = name
    guard = set()
    while cur is not None and cur not in guard:
        guard.add(cur)
        chain.append(types[cur])
        cur = types[cur].parent
    return [(td.name, p) for td in reversed(chain) for p in td.properties]


def _unprefix(name: str, prefix: str) -> str:
    if prefix:
        if not name.startswith(prefix):
            raise BadPath(f"{name!r} is not in model {prefix[:-1]!r}")
        return name[len(prefix):]
    return name


def _check_kind(model: InfoModel, where: str, prop: PropertyDef, v: Any) -> None:
    kind = prop.kind
    ok = {
        "bool": lambda x: isinstance(x, bool),
        "int": lambda x: isinstance(x, int) and not isinstance(x, bool),
        "float": lambda x: isinstance(x, (int, float)) and not isinstance(x, bool),
        "str": lambda x: isinstance(x, str),
        "bytes": lambda x: isinstance(x, (bytes, bytearray)),
        "object": lambda x: isinstance(x, dict),
    }[kind](v)
    if not ok:
        raise SchemaViolation(f"{where}: expected {kind}, got {type(v).__name__}")
    if kind == "object":
        model.validate(prop.type_ref, v)


class FederatedView:
    def __init__(self, models: list[InfoModel]):
        self.models = models

    def browse(self, path: str, tag: Optional[str] = None) -> list[Node]:
        parts = path.strip("/").split("/")
        nodes: list[Node] = []
        if len(parts) == 2 and ":" in parts[1]:
            mid = parts[1].split(":", 1)[0]
            targets = [m for m in self.models if m.model_id == mid]
            if not targets:
                raise BadPath(f"model {mid!r} is not part of this view")
        else:
            targets = self.models
            if len(parts) == 2:
                raise BadPath(f"federated names must be qualified as <model>:<name>, got {parts[1]!r}")
        for m in targets:
            nodes.extend(m._browse(path, f"{m.model_id}:"))
        if tag is not None:
            nodes = [n for n in nodes if tag in n.tags]
        return sorted(nodes, key=lambda n: (n.name, n.kind))


class ModelCatalog:
    """All information models registered in one microdatabase."""

    def __init__(self):
        self.models: dict[str, InfoModel] = {}
        self.lock = threading.RLock()

    def ensure(self, model_id: str) -> InfoModel:
        m = self.models.get(model_id)
        if m is None:
            m = self.models[model_id] = InfoModel(model_id)
        return m

    def get(self, model_id: str) -> InfoModel:
        try:
            return self.models[model_id]
        except KeyError:
            raise UnknownModel(f"no model {model_id!r}") from None

    def resolve_type(self, type_ref: str) -> tuple[InfoModel, TypeDef]:
        """Resolve ``model:Type`` or a bare ``Type`` that is unique across models."""
        if ":" in type_ref:
            mid, name = type_ref.split(":", 1)
            m = self.models.get(mid)
            if m is None or name not in m.types:
                raise InvalidConfig(f"unknown type_ref {type_ref!r}")
            return m, m.types[name]
        hits = [m for m in self.models.values() if type_ref in m.types]
        if not hits:
            raise InvalidConfig(f"unknown type_ref {type_ref!r}")
        if len(hits) > 1:
            raise InvalidConfig(f"ambiguous type_ref {type_ref!r}; qualify it as <model>:{type_ref}")
        return hits[0], hits[0].types[type_ref]

    def validate(self, type_ref: str, value: Any) -> None:
        m, td = self.resolve_type(type_ref)
        m.validate(td.name, value)

    def store_tags(self, store: str) -> set[str]:
        labels: set[str] = set()
        for m in self.models.values():
            labels |= m.store_tags(store)
        return labels

    def federate(self, model_ids: Iterable[str]) -> FederatedView:
        return FederatedView([self.get(mid) for mid in model_ids])

    def browse(self, path: str, tag: Optional[str] = None, model_id: Optional[str] = None) -> list[Node]:
        if model_id is not None:
            return self.get(model_id).browse(path, tag)
        if len(self.models) == 1:
            return next(iter(self.models.values())).browse(path, tag)
        if not self.models:
            InfoModel("")._browse(path, "")  # path validation only
            return []
        if path.strip("/") == "models":
            return sorted((Node("model", mid) for mid in self.models), key=lambda n: n.name)
        return self.federate(sorted(self.models)).browse(path, tag)

    def to_json(self) -> list[dict]:
        return [self.models[k].to_json() for k in sorted(self.models)]

    @classmethod
    def from_json(cls, data: list[dict]) -> "ModelCatalog":
        c = cls()
        for d in data:
            m = InfoModel.from_json(d)
            c.models[m.model_id] = m
        return c
