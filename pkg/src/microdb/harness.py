"""Deterministic multi-tier simulator.

A scenario file describes tiers, links with outage windows, stores,
manifests, scripted ingest sources and a list of timed steps. Every
microdatabase runs in memory on one shared virtual clock; sync frames still
cross an in-memory transport byte for byte.

Times are integer nanoseconds. Any time field may instead be given in
milliseconds with an ``_ms`` suffix (``at_ms``, ``period_ms``,
``outages_ms``...). Events due at the same instant run as scenario steps
first (in file order), then poll ticks (tier order), then scheduled sync
rounds (link order).
"""

from __future__ import annotations

import hashlib
import heapq
import json
import logging
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Union

from .engine import REGISTRY_STORE, SYSTEM, Microdatabase
from .errors import (
    InvalidSpec,
    MicrodbError,
    ParseError,
    ScenarioAssertionFailure,
    TransportDown,
)
from .eventbus import builtin_spec
from .ingest import IngestBinding, ScriptedSource
from .records import KeyRange, Op, RecordKey
from .security import PROVIDERS, TIER_KINDS, Interface, Principal, tiers_adjacent
from .store import ColumnStoreConfig
from .sync import InMemoryTransport, SyncFilter, SyncLink, SyncReport

logger = logging.getLogger(__name__)

MS = 1_000_000
ACTIONS = (
    "append", "mutate", "push", "publish", "deploy", "sync_round", "reconcile", "poll_tick",
    "quiesce", "set_link", "assert_converged", "assert_event_count", "assert_denied",
)
_STEP, _POLL, _SYNC = 0, 1, 2


def _ns(d: dict, key: str, default: Optional[int] = None) -> Optional[int]:
    if key in d:
        return int(d[key])
    if f"{key}_ms" in d:
        return int(round(float(d[f"{key}_ms"]) * MS))
    return default


def _windows(d: dict, key: str) -> list[tuple[int, int]]:
    if key in d:
        return [(int(a), int(b)) for a, b in d[key]]
    if f"{key}_ms" in d:
        return [(int(a * MS), int(b * MS)) for a, b in d[f"{key}_ms"]]
    return []


# -- spec ---------------------------------------------------------------------


@dataclass
class LinkSpec:
    link_id: str
    a: str
    b: str
    filter: SyncFilter
    period: Optional[int]
    outages: list[tuple[int, int]]

    def up(self, t: int) -> bool:
        return not any(lo <= t < hi for lo, hi in self.outages)


@dataclass
class TopologySpec:
    name: str
    seed: int
    horizon: int
    crypto: str
    tiers: list[tuple[str, str]]
    links: list[LinkSpec]
    stores: list[dict]
    manifests: list[dict]
    sources: list[dict]
    callbacks: list[dict]
    steps: list[dict]
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_json(cls, data: dict, base_dir: Optional[Path] = None, seed: Optional[int] = None) -> "TopologySpec":
        problems: list[str] = []
        if not isinstance(data, dict):
            raise InvalidSpec(["scenario must be a JSON object"])
        tiers = []
        ids = set()
        for i, t in enumerate(data.get("tiers", [])):
            rid, kind = t.get("id"), t.get("kind")
            if not rid:
                problems.append(f"tiers[{i}]: id required")
            elif rid in ids:
                problems.append(f"tiers[{i}]: duplicate id {rid!r}")
            if kind not in TIER_KINDS:
                problems.append(f"tiers[{i}]: unknown tier kind {kind!r}")
            ids.add(rid)
            tiers.append((rid, kind))
        kinds = dict(tiers)
        horizon = _ns(data, "horizon", 0)

        links = []
        for i, l in enumerate(data.get("links", [])):
            a, b = l.get("a"), l.get("b")
            lid = l.get("id") or f"{a}--{b}"
            if a not in kinds or b not in kinds:
                problems.append(f"links[{i}]: unknown endpoint in {a!r}--{b!r}")
                continue
            if kinds[a] in TIER_KINDS and kinds[b] in TIER_KINDS and not tiers_adjacent(kinds[a], kinds[b]):
                problems.append(f"links[{i}]: {a} ({kinds[a]}) and {b} ({kinds[b]}) are not adjacent tiers")
            outages = _windows(l, "outages")
            for lo, hi in outages:
                if not 0 <= lo < hi or (horizon and hi > horizon):
                    problems.append(f"links[{i}]: outage window [{lo}, {hi}) outside [0, horizon]")
            try:
                flt = SyncFilter.from_json(l.get("filter", {"stores": ["*"]}))
            except (MicrodbError, ValueError, TypeError) as exc:
                problems.append(f"links[{i}]: {exc}")
                continue
            links.append(LinkSpec(lid, a, b, flt, _ns(l, "period"), outages))
        if len({l.link_id for l in links}) != len(links):
            problems.append("duplicate link ids")

        steps = list(data.get("steps", []))
        last = 0
        for i, s in enumerate(steps):
            if s.get("action") not in ACTIONS:
                problems.append(f"steps[{i}]: unknown action {s.get('action')!r}")
            at = _ns(s, "at", 0)
            if at < last:
                problems.append(f"steps[{i}]: steps must be sorted by time")
            if horizon and at > horizon:
                problems.append(f"steps[{i}]: at {at} beyond horizon {horizon}")
            last = max(last, at)
            tier = s.get("tier")
            if tier is not None and tier != "*" and tier not in kinds:
                problems.append(f"steps[{i}]: unknown tier {tier!r}")
        crypto = data.get("crypto", "aes-256-gcm")
        if crypto not in PROVIDERS:
            problems.append(f"unknown crypto provider {crypto!r}")
        for key in ("stores", "manifests", "sources", "callbacks"):
            for i, d in enumerate(data.get(key, [])):
                tier = d.get("tier", "*")
                if tier != "*" and tier not in kinds:
                    problems.append(f"{key}[{i}]: unknown tier {tier!r}")
        if problems:
            raise InvalidSpec(problems)
        return cls(
            name=data.get("name", "scenario"),
            seed=int(seed if seed is not None else data.get("seed", 0)),
            horizon=horizon,
            crypto=crypto,
            tiers=tiers,
            links=links,
            stores=list(data.get("stores", [])),
            manifests=list(data.get("manifests", [])),
            sources=list(data.get("sources", [])),
            callbacks=list(data.get("callbacks", [])),
            steps=steps,
            base_dir=base_dir or Path.cwd(),
        )


def parse_scenario(path: Union[str, Path], seed: Optional[int] = None) -> TopologySpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return TopologySpec.from_json(data, path.parent, seed)


def bundled_scenario(name: str) -> Optional[Path]:
    """Path of a scenario shipped with the package (``outage-heal`` or ``outage-heal.json``)."""
    fname = name if name.endswith(".json") else f"{name}.json"
    p = resources.files("microdb") / "scenarios" / fname
    return Path(str(p)) if p.is_file() else None


# -- simulation ---------------------------------------------------------------


@dataclass
class Assertion:
    step: int
    at: int
    action: str
    passed: bool
    detail: str

    def to_json(self) -> dict:
        return {"step": self.step, "at": self.at, "action": self.action, "passed": self.passed,
                "detail": self.detail}


class Simulation:
    def __init__(self, spec: TopologySpec):
        self.spec = spec
        self.now = 0
        self.rng = random.Random(spec.seed)
        owner_key = hashlib.sha256(f"microdb-sim-owner:{spec.seed}".encode()).digest()
        self.dbs: dict[str, Microdatabase] = {}
        for rid, kind in spec.tiers:
            self.dbs[rid] = Microdatabase(rid, kind, owner_key=owner_key, clock=self.clock,
                                          crypto=PROVIDERS[spec.crypto]())
        self.links = {l.link_id: l for l in spec.links}
        self.assertions: list[Assertion] = []
        self.rounds: list[dict] = []
        self.warnings: set[str] = set()
        self.counters = {"sync_rounds": 0, "transport_down": 0, "sync_errors": 0, "records_sent": 0,
                         "records_received": 0, "conflicts": 0, "appended": 0, "rejected_appends": 0,
                         "quiescent": 0, "policy_adoptions": 0}
        self._heap: list[tuple[int, int, int, int]] = []
        self._setup()

    def clock(self) -> int:
        return self.now

    def _tiers(self, sel: Optional[str]) -> list[Microdatabase]:
        if sel is None or sel == "*":
            return list(self.dbs.values())
        return [self.dbs[sel]]

    def _setup(self) -> None:
        spec = self.spec
        for d in spec.callbacks:
            for db in self._tiers(d.get("tier", "*")):
                db.register_callback(builtin_spec({k: v for k, v in d.items() if k != "tier"}))
        for d in spec.manifests:
            self._publish(d)
        for d in spec.stores:
            cfg = ColumnStoreConfig.from_json({k: v for k, v in d.items() if k != "tier"})
            for db in self._tiers(d.get("tier", "*")):
                if cfg.name not in db.stores:
                    db.create_store(cfg)
        for l in spec.links:
            a, b = self.dbs[l.a], self.dbs[l.b]
            a.sync.configure_link(SyncLink(l.link_id, b.replica_id, b.tier_kind, l.filter, None))
            b.sync.configure_link(SyncLink(l.link_id, a.replica_id, a.tier_kind, l.filter, None))
        for d in spec.sources:
            self._add_source(d)
        for i, s in enumerate(spec.steps):
            heapq.heappush(self._heap, (_ns(s, "at", 0), _STEP, i, 0))
        for i, l in enumerate(spec.links):
            if l.period:
                heapq.heappush(self._heap, (l.period, _SYNC, i, 0))
        for i, db in enumerate(self.dbs.values()):
            due = db.ingest.next_due()
            if due is not None:
                heapq.heappush(self._heap, (due, _POLL, i, 0))

    def _publish(self, d: dict) -> None:
        manifest = d.get("manifest")
        if manifest is None:
            manifest = json.loads((self.spec.base_dir / d["file"]).read_text())
        for db in self._tiers(d.get("tier")):
            entry = db.registry.publish(manifest)
            if d.get("deploy", False):
                db.registry.deploy(entry.manifest.manifest_id, entry.manifest.version)
                self._reschedule_poll(db)

    def _add_source(self, d: dict) -> None:
        readings = [(int(ts), v) for ts, v in d.get("readings", [])]
        gen = d.get("generate")
        if gen:
            start = _ns(gen, "start", 0)
            spacing = _ns(gen, "spacing", MS)
            base = gen.get("value", 0.0)
            step = gen.get("value_step", 1.0)
            readings += [(start + i * spacing, base + i * step) for i in range(int(gen["count"]))]
        source = ScriptedSource(readings, _windows(d, "outages"))
        for db in self._tiers(d.get("tier")):
            db.ingest.resolver.register(d["address"], source)
            if "bind" in d:
                db.ingest.bind(IngestBinding.from_json({"address": d["address"], **d["bind"]}))
                self._reschedule_poll(db)

    def _reschedule_poll(self, db: Microdatabase) -> None:
        due = db.ingest.next_due()
        if due is not None:
            idx = list(self.dbs).index(db.replica_id)
            heapq.heappush(self._heap, (max(due, self.now), _POLL, idx, 0))

    # -- running -------------------------------------------------------

    def step(self, until: int, strict: bool = True) -> None:
        """Advance virtual time to ``until``, running everything due on the way.

        With ``strict`` an assertion failure raises ScenarioAssertionFailure;
        otherwise it is only recorded.
        """
        if until < self.now:
            raise ValueError(f"cannot step backwards from {self.now} to {until}")
        while self._heap and self._heap[0][0] <= until:
            t, kind, idx, sub = heapq.heappop(self._heap)
            self.now = max(self.now, t)
            if kind == _STEP:
                failed = self._run_step(idx, sub)
                if failed is not None and strict:
                    raise ScenarioAssertionFailure(idx, failed.detail)
            elif kind == _POLL:
                db = list(self.dbs.values())[idx]
                due = db.ingest.next_due()
                if due is not None and due <= self.now:
                    db.ingest.poll_tick(self.now)
                    self._reschedule_poll(db)
            else:
                link = self.spec.links[idx]
                self._round(link.link_id)
                heapq.heappush(self._heap, (t + link.period, _SYNC, idx, 0))
        self.now = until

    def run(self, strict: bool = False) -> "ScenarioReport":
        horizon = self.spec.horizon
        last_step = max((_ns(s, "at", 0) for s in self.spec.steps), default=0)
        self.step(max(horizon, last_step), strict=strict)
        return self.report()

    def _round(self, link_id: str, registry_only: bool = False, fail_after: Optional[int] = None) -> Optional[SyncReport]:
        l = self.links[link_id]
        a, b = self.dbs[l.a], self.dbs[l.b]
        entry = {"at": self.now, "link": link_id}
        self.counters["sync_rounds"] += 1
        try:
            transport = InMemoryTransport(b.sync, up=l.up(self.now), fail_after=fail_after)
            rep = a.sync.sync_round(link_id, transport, registry_only=registry_only)
        except TransportDown as exc:
            self.counters["transport_down"] += 1
            entry["outcome"] = "transport-down"
            self.rounds.append(entry)
            partial = exc.details.get("report")
            if partial is not None:
                self._absorb(partial, entry)
            return None
        except MicrodbError as exc:
            self.counters["sync_errors"] += 1
            entry["outcome"] = exc.code
            self.rounds.append(entry)
            return None
        entry["outcome"] = "ok"
        self._absorb(rep, entry)
        peer = b.sync.last_report(link_id)
        if peer is not None:
            self.warnings.update(f"{l.b}: {w}" for w in peer.warnings)
        self.rounds.append(entry)
        return rep

    def _absorb(self, rep: SyncReport, entry: dict) -> None:
        entry["sent"] = sum(rep.sent.values())
        entry["received"] = sum(rep.received.values())
        self.counters["records_sent"] += entry["sent"]
        self.counters["records_received"] += entry["received"]
        self.counters["conflicts"] += rep.conflicts
        self.counters["policy_adoptions"] += int(rep.policy_adopted)
        l = self.links[rep.link_id]
        self.warnings.update(f"{l.a}: {w}" for w in rep.warnings)

    def quiesce(self, max_rounds: int = 3, links: Optional[list[str]] = None) -> bool:
        """Run passes over the up links until one pass moves nothing, at most ``max_rounds`` passes."""
        ids = links or [l.link_id for l in self.spec.links]
        for _ in range(max_rounds):
            moved = 0
            for lid in ids:
                if not self.links[lid].up(self.now):
                    continue
                rep = self._round(lid)
                if rep is not None:
                    moved += rep.exchanged
            if moved == 0:
                self.counters["quiescent"] += 1
                return True
        return False

    # -- steps ---------------------------------------------------------

    def _principal(self, s: dict) -> Principal:
        subject = s.get("principal")
        return SYSTEM if subject is None else Principal(subject)

    def _run_step(self, idx: int, sub: int) -> Optional[Assertion]:
        s = self.spec.steps[idx]
        action = s["action"]
        try:
            return getattr(self, f"_do_{action}")(idx, sub, s)
        except MicrodbError as exc:
            if action.startswith("assert_"):
                return self._check(idx, action, False, str(exc))
            self.warnings.add(f"step {idx} ({action}): {exc}")
            return None

    def _check(self, idx: int, action: str, ok: bool, detail: str) -> Optional[Assertion]:
        a = Assertion(idx, self.now, action, ok, detail)
        self.assertions.append(a)
        return None if ok else a

    def _do_append(self, idx: int, sub: int, s: dict) -> None:
        count = int(s.get("count", 1))
        value = s.get("value", 0.0)
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = value + sub * s.get("value_step", 0)
        if s.get("random"):
            value = self.rng.random()
        ts = _ns(s, "ts", self.now)
        for db in self._tiers(s.get("tier")):
            try:
                db.append(s["store"], ts, value, self._principal(s))
                self.counters["appended"] += 1
            except MicrodbError as exc:
                self.counters["rejected_appends"] += 1
                self.warnings.add(f"step {idx} (append): {exc.code}")
        if sub + 1 < count:
            spacing = _ns(s, "spacing", MS)
            heapq.heappush(self._heap, (self.now + spacing, _STEP, idx, sub + 1))

    def _do_mutate(self, idx: int, sub: int, s: dict) -> None:
        key = RecordKey(*s["key"]) if isinstance(s["key"], list) else RecordKey(int(s["key"]))
        for db in self._tiers(s.get("tier")):
            db.mutate(s["store"], key, s.get("value"), self._principal(s), delete=bool(s.get("delete")))

    def _do_push(self, idx: int, sub: int, s: dict) -> None:
        for db in self._tiers(s.get("tier")):
            db.ingest.on_push(s["source"], (_ns(s, "ts", self.now), s["value"]))

    def _do_publish(self, idx: int, sub: int, s: dict) -> None:
        self._publish(s)

    def _do_deploy(self, idx: int, sub: int, s: dict) -> None:
        for db in self._tiers(s.get("tier")):
            db.registry.deploy(s["manifest_id"], int(s["version"]))
            self._reschedule_poll(db)

    def _do_sync_round(self, idx: int, sub: int, s: dict) -> None:
        ids = self._link_ids(s)
        if not ids:
            self.counters["transport_down"] += 1
            self.rounds.append({"at": self.now, "link": s.get("link", "*"), "outcome": "transport-down"})
            return
        for lid in ids:
            self._round(lid, fail_after=s.get("fail_after"))

    def _do_reconcile(self, idx: int, sub: int, s: dict) -> None:
        for lid in self._link_ids(s):
            self._round(lid, registry_only=True)

    def _link_ids(self, s: dict) -> list[str]:
        if "link" in s:
            return [s["link"]] if s["link"] in self.links else []
        return [l.link_id for l in self.spec.links]

    def _do_poll_tick(self, idx: int, sub: int, s: dict) -> None:
        for db in self._tiers(s.get("tier")):
            db.ingest.poll_tick(self.now)
            self._reschedule_poll(db)

    def _do_quiesce(self, idx: int, sub: int, s: dict) -> None:
        if not self.quiesce(int(s.get("max_rounds", 3)), s.get("links")):
            self.warnings.add(f"step {idx} (quiesce): not quiescent after {s.get('max_rounds', 3)} rounds")

    def _do_set_link(self, idx: int, sub: int, s: dict) -> None:
        link = self.links[s["link"]]
        if s.get("up", True):
            link.outages = [(lo, hi) for lo, hi in link.outages if not lo <= self.now < hi]
        else:
            link.outages.append((self.now, 2**63 - 1))

    def _do_assert_converged(self, idx: int, sub: int, s: dict) -> Optional[Assertion]:
        replicas = s.get("replicas") or list(self.dbs)
        rng = KeyRange.from_json(s.get("range"))
        problems = []
        for store in s.get("stores", []):
            hashes = {}
            for rid in replicas:
                db = self.dbs[rid]
                if store not in db.stores:
                    hashes[rid] = "missing"
                else:
                    hashes[rid] = db.content_hash(store, rng).hex()[:16] + f"/{len(db.store(store))}"
            if len(set(hashes.values())) != 1:
                problems.append(f"{store}: " + ", ".join(f"{r}={h}" for r, h in sorted(hashes.items())))
        detail = "; ".join(problems) or f"converged on {len(replicas)} replicas"
        return self._check(idx, "assert_converged", not problems, detail)

    def _do_assert_event_count(self, idx: int, sub: int, s: dict) -> Optional[Assertion]:
        problems = []
        txn = s.get("txn", "create")
        for db in self._tiers(s.get("tier")):
            for store in s.get("stores") or db.user_stores():
                events = db.bus.emitted[(store, txn)]
                if "expected" in s:
                    expected = int(s["expected"])
                else:
                    op = {"create": Op.CREATE, "update": Op.UPDATE, "delete": Op.DELETE}[txn]
                    expected = db.store(store).stats.committed[op]
                if events != expected:
                    problems.append(f"{db.replica_id}/{store}: {events} {txn} events, expected {expected}")
        return self._check(idx, "assert_event_count", not problems, "; ".join(problems) or "counts match")

    def _do_assert_denied(self, idx: int, sub: int, s: dict) -> Optional[Assertion]:
        problems = []
        for db in self._tiers(s.get("tier")):
            decision = db.security.authorize(s["principal"], Interface(s["interface"]), s["store"],
                                             KeyRange.from_json(s.get("range")))
            if decision:
                problems.append(f"{db.replica_id}: {s['principal']} allowed {s['interface']} on {s['store']}")
        return self._check(idx, "assert_denied", not problems, "; ".join(problems) or "denied")

    # -- reporting -----------------------------------------------------

    def final_hashes(self) -> dict:
        return {
            rid: {name: db.content_hash(name).hex() for name in db.user_stores() + [REGISTRY_STORE]}
            for rid, db in self.dbs.items()
        }

    def report(self) -> "ScenarioReport":
        events = {
            rid: {f"{store}/{txn}": n for (store, txn), n in sorted(db.bus.emitted.items())}
            for rid, db in self.dbs.items()
        }
        return ScenarioReport(
            name=self.spec.name,
            seed=self.spec.seed,
            passed=all(a.passed for a in self.assertions),
            assertions=list(self.assertions),
            counters=dict(self.counters),
            events=events,
            final_hashes=self.final_hashes(),
            warnings=sorted(self.warnings),
            rounds=list(self.rounds),
        )


@dataclass
class ScenarioReport:
    name: str
    seed: int
    passed: bool
    assertions: list[Assertion]
    counters: dict
    events: dict
    final_hashes: dict
    warnings: list[str]
    rounds: list[dict]

    def to_json(self) -> dict:
        return {
            "scenario": self.name,
            "seed": self.seed,
            "passed": self.passed,
            "assertions": [a.to_json() for a in self.assertions],
            "counters": self.counters,
            "events": self.events,
            "final_hashes": self.final_hashes,
            "warnings": self.warnings,
            "rounds": self.rounds,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"

    def lines(self) -> list[str]:
        out = [f"scenario\t{self.name}\t{'pass' if self.passed else 'fail'}"]
        for a in self.assertions:
            out.append(f"assert\t{a.step}\t{a.action}\t{'pass' if a.passed else 'fail'}\t{a.detail}")
        for w in self.warnings:
            out.append(f"warning\t{w}")
        return out


def load_topology(spec: Union[TopologySpec, dict], seed: Optional[int] = None) -> Simulation:
    if isinstance(spec, dict):
        spec = TopologySpec.from_json(spec, seed=seed)
    return Simulation(spec)


def run_scenario(path: Union[str, Path, dict], seed: Optional[int] = None) -> ScenarioReport:
    if isinstance(path, dict):
        spec = TopologySpec.from_json(path, seed=seed)
    else:
        p = Path(path)
        if not p.exists() and bundled_scenario(str(path)) is not None:
            p = bundled_scenario(str(path))
        spec = parse_scenario(p, seed)
    return Simulation(spec).run()
