"""Request and response models for the HTTP service.

Record values travel as JSON with two escapes so every engine value
round-trips: byte strings as ``{"$bytes": "<base64>"}`` and non-finite
floats as ``{"$float": "nan" | "inf" | "-inf"}``.
"""

from __future__ import annotations

import base64
import math
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field

from ..records import Record


def value_to_json(v: Any) -> Any:
    if isinstance(v, bytes):
        return {"$bytes": base64.b64encode(v).decode()}
    if isinstance(v, float) and not math.isfinite(v):
        return {"$float": "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")}
    if isinstance(v, dict):
        return {k: value_to_json(x) for k, x in v.items()}
    return v


def value_from_json(v: Any) -> Any:
    if isinstance(v, dict):
        if set(v) == {"$bytes"}:
            return base64.b64decode(v["$bytes"])
        if set(v) == {"$float"}:
            return float(v["$float"])
        return {k: value_from_json(x) for k, x in v.items()}
    return v


class StoreConfigIn(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    mutability: str = "immutable"
    value_type: Optional[str] = None
    encrypted: bool = False
    retention: Optional[int] = Field(default=None, ge=1)
    sharing_policy: Optional[str] = None


class RecordIn(BaseModel):
    ts: int
    value: Any


class MutateIn(BaseModel):
    value: Any = None
    delete: bool = False


class ReceiptOut(BaseModel):
    store: str
    key: list[int]
    origin_id: str
    origin_seq: int
    write_ts: int
    event_seq: int


class RecordOut(BaseModel):
    key: list[int]
    value: Any
    op: str
    origin_id: str
    origin_seq: int
    write_ts: int

    @classmethod
    def of(cls, rec: Record) -> "RecordOut":
        return cls(
            key=[rec.key.ts, rec.key.seq],
            value=value_to_json(rec.value),
            op=rec.op.txn,
            origin_id=rec.prov.origin_id,
            origin_seq=rec.prov.origin_seq,
            write_ts=rec.prov.write_ts,
        )


class GrantIn(BaseModel):
    interface: str
    store: str = "*"
    range: Optional[list] = None
    policy: Optional[str] = None


class RoleIn(BaseModel):
    name: str
    grants: list[GrantIn]


class ProvisionIn(BaseModel):
    subject: str
    roles: list[str]
    extend: bool = False


class PolicyIn(BaseModel):
    name: str
    eula_digest: Optional[str] = None
    eula_text: Optional[str] = None
    allow_synchronization: bool = True
    allowed_tier_kinds: list[str] = ["device", "local", "regional", "global"]


class DeployIn(BaseModel):
    manifest_id: str
    version: int = Field(ge=1)


class LogEntryOut(BaseModel):
    tier: str
    seq: int
    manifest_id: str
    version: int
    publisher: str


class NodeOut(BaseModel):
    kind: str
    name: str
    tags: list[str]


class SubscriptionIn(BaseModel):
    store: str = "*"
    txns: Optional[list[str]] = None
    range: Optional[list] = None
    capacity: int = Field(default=1024, ge=1)


class SubscriptionOut(BaseModel):
    id: str


class EventOut(BaseModel):
    event_seq: int
    txn: str
    store: str
    key: Optional[list[int]]
    actor: str
    emit_ts: int


class EventsOut(BaseModel):
    events: list[EventOut]
    gap: bool
    dropped: int


class PushIn(BaseModel):
    ts: int
    value: Any


class PushOut(BaseModel):
    outcome: str
    receipt: Optional[ReceiptOut] = None


class FilterIn(BaseModel):
    stores: list[str] = []
    range: Optional[list] = None
    tag: Optional[str] = None


class LinkIn(BaseModel):
    link_id: str
    peer_id: str
    peer_tier: str
    filter: FilterIn
    period_ms: Optional[int] = Field(default=None, ge=1)
    key: Optional[str] = None


class ErrorOut(BaseModel):
    code: str
    message: str
