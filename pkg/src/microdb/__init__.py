"""Tier-local microdatabase engine with filtered cross-tier sync."""

__version__ = "0.1.0"

from .engine import REGISTRY_STORE, SYSTEM, Microdatabase, Receipt
from .errors import MicrodbError
from .eventbus import CallbackSpec, Event, EventFilter, Reject
from .infomodel import InstanceDef, PropertyDef, Tag, TypeDef
from .ingest import IngestBinding, ScriptedSource
from .records import KeyRange, Op, Provenance, Record, RecordKey
from .registry import Manifest
from .security import Grant, Interface, Principal, Role, SharingPolicy
from .store import ColumnStoreConfig, Mutability
from .sync import InMemoryTransport, SyncFilter, SyncLink, SyncReport

__all__ = [
    "REGISTRY_STORE", "SYSTEM", "Microdatabase", "Receipt", "MicrodbError", "CallbackSpec", "Event",
    "EventFilter", "Reject", "InstanceDef", "PropertyDef", "Tag", "TypeDef", "IngestBinding",
    "ScriptedSource", "KeyRange", "Op", "Provenance", "Record", "RecordKey", "Manifest", "Grant",
    "Interface", "Principal", "Role", "SharingPolicy", "ColumnStoreConfig", "Mutability",
    "InMemoryTransport", "SyncFilter", "SyncLink", "SyncReport",
]
