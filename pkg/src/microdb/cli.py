"""``microdb`` command line.

``serve`` runs an instance behind the HTTP service; ``sim`` runs scenarios
locally; every other subcommand is a thin client of a running service.
Exit codes: 0 success, 1 engine or I/O error, 2 usage error.

Configuration precedence: flags, then environment (``MICRODB_CONFIG``,
``MICRODB_DATA_DIR``, ``MICRODB_URL``, ``MICRODB_TOKEN_FILE``), then the
JSON config file, then defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import threading
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import InvalidConfig, MicrodbError, ParseError

logger = logging.getLogger("microdb")

DEFAULT_URL = "http://127.0.0.1:8765"
DEFAULT_DATA_DIR = "./microdb-data"
TOKEN_TTL_NS = 365 * 24 * 3600 * 10**9


@dataclass
class CliConfig:
    data_dir: str = DEFAULT_DATA_DIR
    replica_id: str = "replica"
    tier_kind: str = "local"
    url: str = DEFAULT_URL
    token_file: Optional[str] = None
    owner_key_file: Optional[str] = None  # hex key shared by every tier of one deployment
    host: str = "127.0.0.1"
    port: int = 8765
    peers: dict = field(default_factory=dict)  # link id -> peer base URL

    def validate(self) -> None:
        from .security import TIER_KINDS

        if not self.replica_id:
            raise InvalidConfig("replica id must be non-empty")
        if self.tier_kind not in TIER_KINDS:
            raise InvalidConfig(f"unknown tier kind {self.tier_kind!r}")

    def default_token_path(self) -> Path:
        return Path(self.data_dir) / self.replica_id / "owner.token"


def load_config(args: argparse.Namespace) -> CliConfig:
    cfg = CliConfig()
    path = getattr(args, "config", None) or os.environ.get("MICRODB_CONFIG")
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise InvalidConfig(f"config file {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        known = {f.name for f in fields(CliConfig)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys {sorted(unknown)}")
        for k, v in data.items():
            setattr(cfg, k, v)
    env = {"data_dir": "MICRODB_DATA_DIR", "url": "MICRODB_URL", "token_file": "MICRODB_TOKEN_FILE"}
    for attr, var in env.items():
        if os.environ.get(var):
            setattr(cfg, attr, os.environ[var])
    for attr in ("data_dir", "replica_id", "tier_kind", "url", "token_file", "owner_key_file", "host", "port"):
        v = getattr(args, attr, None)
        if v is not None:
            setattr(cfg, attr, v)
    for spec in getattr(args, "peer", None) or []:
        link_id, sep, url = spec.partition("=")
        if not sep or not link_id or not url:
            raise InvalidConfig(f"--peer expects LINK_ID=URL, got {spec!r}")
        cfg.peers[link_id] = url
    return cfg


def _client(cfg: CliConfig):
    from .service.client import Client

    token = None
    path = Path(cfg.token_file) if cfg.token_file else cfg.default_token_path()
    if path.exists():
        token = path.read_text().strip()
    elif cfg.token_file:
        raise InvalidConfig(f"token file {path} not found")
    return Client(cfg.url, token)


def _out(*cols) -> None:
    print("\t".join(str(c) for c in cols))


# -- serve --------------------------------------------------------------------


def _scheduler(db, transports: dict, stop: threading.Event, tick: float = 0.05) -> None:
    """Drive poll deadlines and periodic sync rounds on the wall clock."""
    next_round: dict[str, int] = {}
    while not stop.wait(tick):
        now = db.clock()
        due = db.ingest.next_due()
        if due is not None and due <= now:
            db.ingest.poll_tick(now)
        for link_id, link in list(db.sync.links.items()):
            if link.period_ms is None or link_id not in transports:
                continue
            at = next_round.setdefault(link_id, now + link.period_ms * 1_000_000)
            if at > now:
                continue
            next_round[link_id] = now + link.period_ms * 1_000_000
            try:
                db.sync.sync_round(link_id, transports[link_id])
            except MicrodbError as exc:
                logger.warning("sync round on %s failed: %s", link_id, exc)


def cmd_serve(args, cfg: CliConfig) -> int:
    import uvicorn

    from .engine import Microdatabase
    from .service.app import create_app
    from .service.client import Client, HttpTransport

    cfg.validate()
    owner_key = None
    if cfg.owner_key_file:
        try:
            owner_key = bytes.fromhex(Path(cfg.owner_key_file).read_text().strip())
        except ValueError:
            raise InvalidConfig(f"{cfg.owner_key_file}: owner key must be hex") from None
    db = Microdatabase(cfg.replica_id, cfg.tier_kind, cfg.data_dir, owner_key=owner_key, fsync=True)
    token = db.issue_token(db.owner, TOKEN_TTL_NS).decode()
    token_path = Path(cfg.token_file) if cfg.token_file else cfg.default_token_path()
    token_path.parent.mkdir(parents=True, exist_ok=True)
    token_path.write_text(token + "\n")
    os.chmod(token_path, 0o600)
    transports = {lid: HttpTransport(Client(url, token)) for lid, url in cfg.peers.items()}
    app = create_app(db, transports)
    stop = threading.Event()
    worker = threading.Thread(target=_scheduler, args=(db, transports, stop), daemon=True)
    worker.start()
    print(f"serving {cfg.replica_id} ({cfg.tier_kind}) on http://{cfg.host}:{cfg.port}; token in {token_path}",
          file=sys.stderr)
    try:
        uvicorn.run(app, host=cfg.host, port=int(cfg.port), log_level="warning")
    finally:
        stop.set()
        db.close()
    return 0


# -- client commands ----------------------------------------------------------


def cmd_publish(args, cfg: CliConfig) -> int:
    try:
        text = Path(args.file).read_text()
    except OSError as exc:
        raise InvalidConfig(f"{args.file}: {exc.strerror}") from None
    try:
        body = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{args.file}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    e = _client(cfg).post("/registry/manifests", body)
    _out(e["tier"], e["seq"], e["manifest_id"], e["version"], e["publisher"])
    return 0


def cmd_deploy(args, cfg: CliConfig) -> int:
    report = _client(cfg).post("/registry/deploy", {"manifest_id": args.manifest_id, "version": args.version})
    if report["noop"]:
        _out("noop", args.manifest_id, args.version)
    for section, res in report["sections"].items():
        for name in res["created"]:
            _out("created", section, name)
        for name in res["skipped"]:
            _out("skipped", section, name)
    return 0


def cmd_registry_log(args, cfg: CliConfig) -> int:
    for e in _client(cfg).get("/registry/log"):
        _out(e["tier"], e["seq"], e["manifest_id"], e["version"], e["publisher"])
    return 0


def cmd_browse(args, cfg: CliConfig) -> int:
    for n in _client(cfg).get("/browse", path=args.path, tag=args.tag, model=args.model):
        _out(n["kind"], n["name"], ",".join(n["tags"]))
    return 0


def cmd_tail(args, cfg: CliConfig) -> int:
    client = _client(cfg)
    txns = args.txn.split(",") if args.txn else None
    sub = client.post("/subscriptions", {"store": args.store, "txns": txns})["id"]
    seen = 0
    deadline = time.monotonic() + args.timeout if args.timeout else None
    try:
        while args.count is None or seen < args.count:
            if deadline is not None and time.monotonic() >= deadline:
                break
            batch = client.get(f"/subscriptions/{sub}/events", timeout=1.0)
            if batch["gap"]:
                print(f"# gap: {batch['dropped']} events dropped", file=sys.stderr)
            for e in batch["events"]:
                key = f"{e['key'][0]},{e['key'][1]}" if e["key"] else "-"
                _out(e["event_seq"], e["txn"], e["store"], key, e["actor"])
                seen += 1
                if args.count is not None and seen >= args.count:
                    break
            sys.stdout.flush()
    except KeyboardInterrupt:
        pass
    finally:
        client.delete(f"/subscriptions/{sub}")
    return 0


def cmd_ingest_status(args, cfg: CliConfig) -> int:
    for r in _client(cfg).get("/ingest/status"):
        _out(r["source_id"], r["store"], r["mode"], r["appended"], r["dropped"], r["duplicate"], r["unreachable"])
    return 0


def cmd_sync_run(args, cfg: CliConfig) -> int:
    rep = _client(cfg).post(f"/sync/links/{args.link}/run")
    for store, n in rep["sent"].items():
        _out("sent", store, n)
    for store, n in rep["received"].items():
        _out("received", store, n)
    _out("conflicts", rep["conflicts"])
    _out("policy-bundles", rep["policy_bundles"])
    for w in rep["warnings"]:
        _out("warning", w)
    return 0


def cmd_sync_status(args, cfg: CliConfig) -> int:
    for l in _client(cfg).get("/sync/links"):
        period = l["period_ms"] if l["period_ms"] is not None else "manual"
        _out(l["link_id"], l["peer_id"], l["peer_tier"], ",".join(l["filter"]["stores"]) or "-", period,
             l["acked_entries"])
    return 0


def cmd_sync_link(args, cfg: CliConfig) -> int:
    body = {"link_id": args.link, "peer_id": args.peer_id, "peer_tier": args.peer_tier,
            "filter": {"stores": args.stores.split(",") if args.stores else []},
            "period_ms": args.period_ms, "key": args.key}
    link = _client(cfg).post("/sync/links", body)
    _out("link", link["link_id"], link["peer_id"], link["peer_tier"])
    return 0


def cmd_sim_run(args, cfg: CliConfig) -> int:
    from .harness import bundled_scenario, parse_scenario, Simulation

    path = Path(args.scenario)
    if not path.exists():
        bundled = bundled_scenario(args.scenario)
        if bundled is not None:
            path = bundled
    spec = parse_scenario(path, args.seed)
    report = Simulation(spec).run()
    out = Path(args.out) if args.out else Path(f"{spec.name}.report.json")
    out.write_text(report.dumps())
    for line in report.lines():
        print(line)
    print(f"report\t{out}")
    return 0 if report.passed else 1


def cmd_sim_report(args, cfg: CliConfig) -> int:
    try:
        data = json.loads(Path(args.report).read_text())
    except OSError as exc:
        raise ParseError(f"{args.report}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{args.report}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    _out("scenario", data["scenario"], "pass" if data["passed"] else "fail")
    for a in data["assertions"]:
        _out("assert", a["step"], a["action"], "pass" if a["passed"] else "fail", a["detail"])
    for k, v in sorted(data["counters"].items()):
        _out("counter", k, v)
    for rid, stores in sorted(data["final_hashes"].items()):
        for store, h in sorted(stores.items()):
            _out("hash", rid, store, h)
    for w in data["warnings"]:
        _out("warning", w)
    return 0 if data["passed"] else 1


def _grant(text: str) -> dict:
    """``interface=exchange-read,store=temp,lo=0,hi=100,policy=p`` -> grant JSON."""
    try:
        kv = dict(part.split("=", 1) for part in text.split(","))
    except ValueError:
        raise InvalidConfig(f"bad grant {text!r}; expected key=value pairs") from None
    unknown = set(kv) - {"interface", "store", "lo", "hi", "policy"}
    if unknown or "interface" not in kv:
        raise InvalidConfig(f"bad grant {text!r}")
    rng = None
    if "lo" in kv or "hi" in kv:
        rng = [int(kv["lo"]) if kv.get("lo") else None, int(kv["hi"]) if kv.get("hi") else None]
    return {"interface": kv["interface"], "store": kv.get("store", "*"), "range": rng, "policy": kv.get("policy")}


def cmd_admin_create_store(args, cfg: CliConfig) -> int:
    body = {"name": args.name, "mutability": "mutable" if args.mutable else "immutable",
            "value_type": args.value_type, "encrypted": args.encrypted, "retention": args.retention,
            "sharing_policy": args.sharing_policy}
    cfgd = _client(cfg).post("/stores", body)
    _out("created", cfgd["name"], cfgd["mutability"])
    return 0


def cmd_admin_drop_store(args, cfg: CliConfig) -> int:
    _client(cfg).delete(f"/stores/{args.name}")
    _out("dropped", args.name)
    return 0


def cmd_admin_define_role(args, cfg: CliConfig) -> int:
    role = _client(cfg).post("/roles", {"name": args.name, "grants": [_grant(g) for g in args.grant]})
    _out("role", role["name"], len(role["grants"]))
    return 0


def cmd_admin_provision(args, cfg: CliConfig) -> int:
    res = _client(cfg).post("/provision", {"subject": args.subject, "roles": args.roles})
    _out("provisioned", res["subject"], ",".join(res["roles"]))
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # suppressed defaults so a flag given before the subcommand is not reset by the subparser's copy
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON config file (else $MICRODB_CONFIG)")
    common.add_argument("--data-dir", dest="data_dir")
    common.add_argument("--replica-id", dest="replica_id")
    common.add_argument("--url", help=f"service base URL (else $MICRODB_URL, default {DEFAULT_URL})")
    common.add_argument("--token-file", dest="token_file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="microdb", parents=[common],
                                description="Tier-local microdatabase: serve, administer, sync, simulate.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, fn, help_text, parent=sub):
        sp = parent.add_parser(name, parents=[common], help=help_text, description=help_text)
        sp.set_defaults(func=fn)
        return sp

    sp = add("serve", cmd_serve, "run an instance behind the HTTP service")
    sp.add_argument("--tier", dest="tier_kind", choices=["device", "local", "regional", "global"])
    sp.add_argument("--host")
    sp.add_argument("--port", type=int)
    sp.add_argument("--owner-key-file", dest="owner_key_file",
                    help="hex owner key shared by peers so tokens and link keys agree")
    sp.add_argument("--peer", action="append", metavar="LINK_ID=URL", help="outbound sync endpoint for a link")

    sp = add("publish", cmd_publish, "publish a manifest file to the registry log")
    sp.add_argument("file")
    sp = add("deploy", cmd_deploy, "deploy a published manifest version on this tier")
    sp.add_argument("manifest_id")
    sp.add_argument("version", type=int)
    add("registry-log", cmd_registry_log, "list registry log entries")
    sp = add("browse", cmd_browse, "browse the information model")
    sp.add_argument("path")
    sp.add_argument("--tag")
    sp.add_argument("--model")
    sp = add("tail", cmd_tail, "stream events for a store")
    sp.add_argument("store")
    sp.add_argument("--txn", help="comma-separated txn kinds, e.g. create,update")
    sp.add_argument("--count", type=int, help="stop after N events")
    sp.add_argument("--timeout", type=float, help="stop after S seconds")
    add("ingest-status", cmd_ingest_status, "per-binding ingest counters")

    sync = sub.add_parser("sync", help="synchronization links").add_subparsers(dest="sync_cmd", required=True,
                                                                                metavar="SUBCOMMAND")
    sp = add("run", cmd_sync_run, "run one sync round on a link", sync)
    sp.add_argument("link")
    add("status", cmd_sync_status, "list configured links", sync)
    sp = add("link", cmd_sync_link, "configure a link by hand (e.g. the accepting side before any manifest)", sync)
    sp.add_argument("link")
    sp.add_argument("peer_id")
    sp.add_argument("peer_tier", choices=["device", "local", "regional", "global"])
    sp.add_argument("--stores", help="comma-separated store names or patterns")
    sp.add_argument("--period-ms", dest="period_ms", type=int)
    sp.add_argument("--key", help="hex link key (default: derived from the owner key)")

    sim = sub.add_parser("sim", help="deterministic multi-tier simulation").add_subparsers(
        dest="sim_cmd", required=True, metavar="SUBCOMMAND")
    sp = add("run", cmd_sim_run, "run a scenario file (or a bundled scenario name)", sim)
    sp.add_argument("scenario")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="report path (default <scenario>.report.json)")
    sp = add("report", cmd_sim_report, "summarize a saved scenario report", sim)
    sp.add_argument("report")

    admin = sub.add_parser("admin", help="store and security administration").add_subparsers(
        dest="admin_cmd", required=True, metavar="SUBCOMMAND")
    sp = add("create-store", cmd_admin_create_store, "create a column store", admin)
    sp.add_argument("name")
    sp.add_argument("--mutable", action="store_true")
    sp.add_argument("--value-type", dest="value_type")
    sp.add_argument("--encrypted", action="store_true")
    sp.add_argument("--retention", type=int)
    sp.add_argument("--sharing-policy", dest="sharing_policy")
    sp = add("drop-store", cmd_admin_drop_store, "drop a column store and its records", admin)
    sp.add_argument("name")
    sp = add("define-role", cmd_admin_define_role, "define or replace a role", admin)
    sp.add_argument("name")
    sp.add_argument("--grant", action="append", required=True,
                    metavar="interface=I,store=S[,lo=TS][,hi=TS][,policy=P]")
    sp = add("provision", cmd_admin_provision, "bind a subject to roles (replaces prior roles)", admin)
    sp.add_argument("subject")
    sp.add_argument("roles", nargs="+")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return args.func(args, cfg)
    except MicrodbError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
