"""FastAPI service exposing one microdatabase.

Every route except ``/health`` needs ``Authorization: Bearer <token>`` with
a token the instance's registry key signs; the engine then authorizes the
authenticated subject per call. Engine errors come back as
``{"code", "message"}`` with a status derived from the code.
"""

import logging
import threading
from typing import Annotated, Optional

from fastapi import Depends, FastAPI, Header, Query, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .. import __version__
from ..engine import Microdatabase
from ..errors import AuthFailure, MicrodbError, Unauthorized
from ..eventbus import TXNS, EventFilter
from ..ingest import Dropped
from ..records import KeyRange, RecordKey
from ..registry import Manifest
from ..security import Grant, Interface, Principal, Role, SharingPolicy
from ..store import ColumnStoreConfig
from ..sync import SyncFilter, SyncLink, Transport
from . import schemas as s

logger = logging.getLogger(__name__)

STATUS_BY_CODE = {
    "unauthorized": 403,
    "unauthorized-range": 403,
    "bad-signature": 401,
    "expired": 401,
    "malformed": 401,
    "auth-failure": 401,
    "not-found": 404,
    "unknown-store": 404,
    "unknown-role": 404,
    "unknown-model": 404,
    "unknown-subscription": 404,
    "key-not-found": 404,
    "duplicate-name": 409,
    "duplicate": 409,
    "duplicate-tag": 409,
    "already-bound": 409,
    "stale-version": 409,
    "immutable-store": 409,
    "transport-down": 503,
}


def _key(text: Optional[str]) -> Optional[RecordKey]:
    return RecordKey.parse(text) if text else None


def create_app(db: Microdatabase, transports: Optional[dict[str, Transport]] = None) -> FastAPI:
    """Build the app. ``transports`` maps link ids to outbound transports for ``/sync/links/{id}/run``."""
    app = FastAPI(title="microdb", version=__version__)
    app.state.db = db
    app.state.transports = dict(transports or {})
    tail_lock = threading.Lock()

    @app.exception_handler(MicrodbError)
    async def engine_error(request: Request, exc: MicrodbError):
        return JSONResponse(status_code=STATUS_BY_CODE.get(exc.code, 400),
                            content={"code": exc.code, "message": exc.args[0]})

    @app.exception_handler(RequestValidationError)
    async def bad_request(request: Request, exc: RequestValidationError):
        detail = "; ".join(f"{'.'.join(str(x) for x in e['loc'])}: {e['msg']}" for e in exc.errors())
        return JSONResponse(status_code=422, content={"code": "invalid-request", "message": detail})

    def principal(authorization: Annotated[Optional[str], Header()] = None) -> Principal:
        if not authorization or not authorization.lower().startswith("bearer "):
            raise AuthFailure("missing bearer token")
        return db.authenticate(authorization.split(None, 1)[1])

    Auth = Annotated[Principal, Depends(principal)]

    @app.get("/health")
    def health() -> dict:
        return {"replica_id": db.replica_id, "tier": db.tier_kind}

    @app.get("/status")
    def status(p: Auth) -> dict:
        return {"replica_id": db.replica_id, "tier": db.tier_kind, "stores": db.status()}

    @app.get("/config")
    def config(p: Auth) -> dict:
        db.require(p, Interface.ADMIN, "*")
        return db.config_dump()

    # -- stores and records -----------------------------------------

    @app.post("/stores", status_code=201)
    def create_store(body: s.StoreConfigIn, p: Auth) -> dict:
        cfg = ColumnStoreConfig.from_json(body.model_dump())
        db.create_store(cfg, p)
        return cfg.to_json()

    @app.delete("/stores/{name}", status_code=204)
    def drop_store(name: str, p: Auth) -> Response:
        db.drop_store(name, p)
        return Response(status_code=204)

    @app.post("/stores/{name}/records", status_code=201)
    def append(name: str, body: s.RecordIn, p: Auth) -> s.ReceiptOut:
        receipt = db.append(name, body.ts, s.value_from_json(body.value), p)
        return s.ReceiptOut(**receipt.to_json())

    @app.get("/stores/{name}/records")
    def read_range(name: str, p: Auth, lo: Optional[str] = None, hi: Optional[str] = None,
                   limit: Annotated[Optional[int], Query(ge=1)] = None) -> list[s.RecordOut]:
        return [s.RecordOut.of(r) for r in db.read_range(name, _key(lo), _key(hi), limit, p)]

    @app.put("/stores/{name}/records/{key}")
    def mutate(name: str, key: str, body: s.MutateIn, p: Auth) -> s.ReceiptOut:
        receipt = db.mutate(name, RecordKey.parse(key), s.value_from_json(body.value), p, delete=body.delete)
        return s.ReceiptOut(**receipt.to_json())

    @app.delete("/stores/{name}/records/{key}")
    def delete(name: str, key: str, p: Auth) -> s.ReceiptOut:
        return s.ReceiptOut(**db.delete(name, RecordKey.parse(key), p).to_json())

    @app.get("/stores/{name}/hash")
    def content_hash(name: str, p: Auth) -> dict:
        db.require(p, Interface.EXCHANGE_READ, name)
        return {"store": name, "hash": db.content_hash(name).hex()}

    # -- events -----------------------------------------------------

    @app.post("/subscriptions", status_code=201)
    def subscribe(body: s.SubscriptionIn, p: Auth) -> s.SubscriptionOut:
        flt = EventFilter(body.store, frozenset(body.txns or TXNS), KeyRange.from_json(body.range))
        return s.SubscriptionOut(id=db.subscribe(flt, p, body.capacity).id)

    @app.get("/subscriptions/{sub_id}/events")
    def poll_events(sub_id: str, p: Auth, timeout: Annotated[float, Query(ge=0, le=60)] = 0.0,
                    max_events: Annotated[Optional[int], Query(ge=1)] = None) -> s.EventsOut:
        sub = db.bus.get(sub_id)
        if sub.subject != p.subject and not db.is_owner(p):
            raise Unauthorized(f"{p.subject} does not own {sub_id}")
        events = sub.wait(timeout, max_events) if timeout else sub.drain(max_events)
        with tail_lock:
            gap, sub.gap = sub.gap, False
        return s.EventsOut(events=[s.EventOut(**e.to_json()) for e in events], gap=gap, dropped=sub.dropped)

    @app.delete("/subscriptions/{sub_id}", status_code=204)
    def unsubscribe(sub_id: str, p: Auth) -> Response:
        db.unsubscribe(sub_id, p)
        return Response(status_code=204)

    # -- information model ------------------------------------------

    @app.get("/browse")
    def browse(p: Auth, path: str = "/types", tag: Optional[str] = None,
               model: Optional[str] = None) -> list[s.NodeOut]:
        return [s.NodeOut(**n.to_json()) for n in db.browse(path, tag, model)]

    # -- security admin ---------------------------------------------

    @app.post("/roles", status_code=201)
    def define_role(body: s.RoleIn, p: Auth) -> dict:
        role = Role(body.name, tuple(Grant.from_json(g.model_dump()) for g in body.grants))
        db.define_role(role, p)
        return role.to_json()

    @app.post("/provision")
    def provision(body: s.ProvisionIn, p: Auth) -> dict:
        db.provision(body.subject, body.roles, p, extend=body.extend)
        return {"subject": body.subject, "roles": list(db.security.roles_of(body.subject))}

    @app.post("/policies", status_code=201)
    def define_policy(body: s.PolicyIn, p: Auth) -> dict:
        policy = SharingPolicy.from_json(body.model_dump(exclude_none=True))
        db.define_policy(policy, p)
        return policy.to_json()

    # -- registry ---------------------------------------------------

    @app.post("/registry/manifests", status_code=201)
    def publish(body: dict, p: Auth) -> s.LogEntryOut:
        entry = db.registry.publish(Manifest.parse(body), p)
        return s.LogEntryOut(**entry.to_json())

    @app.get("/registry/log")
    def registry_log(p: Auth) -> list[s.LogEntryOut]:
        return [s.LogEntryOut(**e.to_json()) for e in db.registry.log()]

    @app.post("/registry/deploy")
    def deploy(body: s.DeployIn, p: Auth) -> dict:
        return db.registry.deploy(body.manifest_id, body.version, p).to_json()

    # -- ingest -----------------------------------------------------

    @app.get("/ingest/status")
    def ingest_status(p: Auth) -> list[dict]:
        return db.ingest.status()

    @app.post("/ingest/push/{source_id}")
    def push(source_id: str, body: s.PushIn, p: Auth) -> s.PushOut:
        db.require(p, Interface.ADMIN, "*")
        out = db.ingest.on_push(source_id, (body.ts, s.value_from_json(body.value)))
        if isinstance(out, Dropped):
            return s.PushOut(outcome=out.reason)
        return s.PushOut(outcome="appended", receipt=s.ReceiptOut(**out.to_json()))

    # -- sync -------------------------------------------------------

    @app.get("/sync/links")
    def sync_status(p: Auth) -> list[dict]:
        return db.sync.status()

    @app.post("/sync/links", status_code=201)
    def configure_link(body: s.LinkIn, p: Auth) -> dict:
        flt = SyncFilter.from_json(body.filter.model_dump())
        link = SyncLink(body.link_id, body.peer_id, body.peer_tier, flt, body.period_ms,
                        bytes.fromhex(body.key) if body.key else None)
        db.sync.configure_link(link, p)
        return link.to_json()

    @app.post("/sync/links/{link_id}/run")
    def run_round(link_id: str, p: Auth) -> dict:
        db.require(p, Interface.SYNC, "*")
        return db.sync.sync_round(link_id, app.state.transports.get(link_id)).to_json()

    @app.post("/sync/frames")
    async def frames(request: Request, p: Auth) -> Response:
        db.require(p, Interface.SYNC, "*")
        body = await request.body()
        reply = db.sync.handle(body)
        return Response(content=reply, media_type="application/octet-stream")

    return app
