"""Cloud control plane.

The cloud keeps the edge inventory, answers discovery, registers flows and
mints their identities, serves the data catalogue, and turns consumer
sessions into pipeline orders, bridges and per-session forks. Every sample
is processed once by the pipeline serving its flow; the multiplication to
consumers happens in the forks, one per (session, source topic).

Path from a pipeline on host H to a consumer topic on broker C:

* H is C          -> fork straight off the pipeline output topic
* H edge, C cloud -> bridge H -> cloud, fork on the cloud copy
* H edge, C edge  -> bridge H -> cloud -> C (edges never talk directly)
* H cloud, C edge -> bridge cloud -> C
"""
from __future__ import annotations

import itertools
import logging
import random
import secrets
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Set, Tuple

import numpy as np

from .broker import AccessToken, Broker, Envelope, Mode, bridge, consumer_topic, validate_topic
from .domain import DataQuery, DataType, FlowDescriptor, GeoPoint, GeoRegion, ProducerDescriptor, SlaContract
from .edge import (
    DEFAULT_STARTUP_DELAY_MS, PLATFORM_TOKEN_TTL_S, EdgeNode, PipelineHost, PipelineInstance, PipelineSpec,
    default_policy,
)
from .netem import NS_PER_MS, NS_PER_S

logger = logging.getLogger(__name__)

CLOUD_ID = "cloud"
CLOUD_ENDPOINT = "inproc://cloud"
DEFAULT_BRIDGE_SETUP_MS = 150.0
CONTROL_PROFILE = "BRIDGE"


class CloudError(Exception):
    pass


class OverlapError(CloudError):
    pass


class UnknownSession(CloudError, KeyError):
    pass


class UnknownFlow(CloudError, KeyError):
    pass


class InsufficientEdgeCapacity(CloudError):
    pass


@dataclass
class EdgeRecord:
    edge_id: str
    serving_area: GeoRegion
    endpoint: str
    capacity: float
    deployed_pipelines: Set[str] = field(default_factory=set)
    allocated: float = 0.0

    @property
    def remaining(self) -> float:
        return self.capacity - self.allocated

    def to_dict(self) -> dict:
        return {
            "edge_id": self.edge_id,
            "serving_area": self.serving_area.to_dict(),
            "endpoint": self.endpoint,
            "capacity": self.capacity,
            "deployed_pipelines": sorted(self.deployed_pipelines),
        }


@dataclass(frozen=True)
class Discovery:
    host_id: str
    endpoint: str

    @property
    def is_cloud(self) -> bool:
        return self.host_id == CLOUD_ID


class IdMinter:
    """Flow ids and pseudo ids drawn from two unrelated random streams.

    With no seed both come from the OS CSPRNG. A seed makes runs
    reproducible; the two streams are then seeded from separate hashes so
    one id still says nothing about the other.
    """

    def __init__(self, seed: Optional[int] = None):
        if seed is None:
            self._flow = self._pseudo = None
        else:
            self._flow = random.Random(f"flow-id/{seed}")
            self._pseudo = random.Random(f"pseudo-id/{seed}")
        self._issued: Set[str] = set()

    def _draw(self, rng, prefix: str) -> str:
        while True:
            value = secrets.token_hex(12) if rng is None else f"{rng.getrandbits(96):024x}"
            ident = f"{prefix}{value}"
            if ident not in self._issued:
                self._issued.add(ident)
                return ident

    def mint(self) -> Tuple[str, str]:
        return self._draw(self._flow, "flow-"), self._draw(self._pseudo, "p")


class Catalogue:
    """Registered flows with a columnar index for query resolution."""

    def __init__(self, quality: Callable[[str], Optional[float]] = lambda pid: None):
        self.flows: Dict[str, FlowDescriptor] = {}
        self.quality = quality
        self._dirty = True
        self._ids: List[str] = []

    def add(self, flow: FlowDescriptor) -> None:
        self.flows[flow.pseudo_id] = flow
        self._dirty = True

    def remove(self, pseudo_id: str) -> Optional[FlowDescriptor]:
        self._dirty = True
        return self.flows.pop(pseudo_id, None)

    def __len__(self):
        return len(self.flows)

    def __contains__(self, pseudo_id):
        return pseudo_id in self.flows

    def _rebuild(self) -> None:
        self._ids = list(self.flows)
        fl = [self.flows[i] for i in self._ids]
        self._lat = np.array([f.home_position.lat for f in fl], dtype=float)
        self._lon = np.array([f.home_position.lon for f in fl], dtype=float)
        self._type = np.array([f.data_type.value for f in fl], dtype=object)
        self._lic = np.array([f.licence.id for f in fl], dtype=object)
        self._dirty = False

    def score(self, pseudo_id: str) -> float:
        # flows never observed carry the prior score of a clean flow
        q = self.quality(pseudo_id)
        return 1.0 if q is None else q

    def resolve(self, query: DataQuery) -> List[FlowDescriptor]:
        if self._dirty:
            self._rebuild()
        if not self._ids:
            return []
        r = query.region
        mask = (self._lat >= r.min_lat) & (self._lat <= r.max_lat) & (self._lon >= r.min_lon) & (self._lon <= r.max_lon)
        mask &= np.isin(self._type, [t.value for t in query.data_types])
        mask &= np.isin(self._lic, [l.id for l in query.licences])
        out = []
        for i in np.flatnonzero(mask):
            pid = self._ids[i]
            if query.min_quality <= 0.0 or self.score(pid) >= query.min_quality:
                out.append(self.flows[pid])
        return out


# -- accounting ------------------------------------------------------------

@dataclass
class AccountingRecord:
    consumer_id: str
    bytes_delivered: int = 0
    samples_delivered: int = 0
    cpu_unit_seconds: float = 0.0
    licences: FrozenSet[str] = frozenset()
    regions: Tuple[dict, ...] = ()

    def to_dict(self) -> dict:
        return {
            "consumer_id": self.consumer_id,
            "bytes_delivered": self.bytes_delivered,
            "samples_delivered": self.samples_delivered,
            "cpu_unit_seconds": self.cpu_unit_seconds,
            "licences": sorted(self.licences),
            "regions": list(self.regions),
        }


class _ConsumerAccount:
    def __init__(self):
        self.ts: List[int] = []
        self.nbytes: List[int] = []
        self.licence: List[str] = []
        self.bytes_delivered = 0
        self.samples_delivered = 0
        # session_id -> [start, end or None, cpu_allocation, region, licences]
        self.sessions: Dict[str, list] = {}


class AccountingLedger:
    """Pay-as-you-go counters per consumer; deliveries are logged at hand-off."""

    def __init__(self):
        self._accounts: Dict[str, _ConsumerAccount] = defaultdict(_ConsumerAccount)

    def record_delivery(self, consumer_id: str, env: Envelope, ts: int) -> None:
        acc = self._accounts[consumer_id]
        n = len(env.payload)
        acc.ts.append(ts)
        acc.nbytes.append(n)
        acc.licence.append(env.licence)
        acc.bytes_delivered += n
        acc.samples_delivered += 1

    def session_opened(self, consumer_id: str, session_id: str, ts: int, cpu_allocation: float,
                       region: GeoRegion, licences: Iterable[str]) -> None:
        self._accounts[consumer_id].sessions[session_id] = [ts, None, cpu_allocation, region, frozenset(licences)]

    def session_closed(self, consumer_id: str, session_id: str, ts: int) -> None:
        entry = self._accounts[consumer_id].sessions.get(session_id)
        if entry is not None and entry[1] is None:
            entry[1] = ts

    def consumers(self) -> List[str]:
        return list(self._accounts)

    def totals(self) -> Tuple[int, int]:
        return (sum(a.bytes_delivered for a in self._accounts.values()),
                sum(a.samples_delivered for a in self._accounts.values()))

    def report(self, consumer_id: str, window: Optional[Tuple[int, int]] = None, now: int = 0) -> AccountingRecord:
        """Counters for ``consumer_id`` over the half-open window [start, end)."""
        if window is not None:
            start, end = window
            if end < start:
                raise ValueError("window end precedes its start")
        acc = self._accounts.get(consumer_id)
        if acc is None:
            return AccountingRecord(consumer_id)
        if window is None:
            nbytes, nsamples = acc.bytes_delivered, acc.samples_delivered
            lics = set(acc.licence)
            start, end = None, None
        else:
            ts = np.asarray(acc.ts, dtype=np.int64)
            lo, hi = np.searchsorted(ts, start, "left"), np.searchsorted(ts, end, "left")
            nbytes = int(np.sum(np.asarray(acc.nbytes[lo:hi], dtype=np.int64)))
            nsamples = int(hi - lo)
            lics = set(acc.licence[lo:hi])
        cpu = 0.0
        regions = []
        for sid, (s0, s1, alloc, region, held) in acc.sessions.items():
            s1 = now if s1 is None else s1
            a, b = s0, s1
            if window is not None:
                a, b = max(a, start), min(b, end)
            if b > a or (window is None):
                cpu += alloc * max(0, b - a) / NS_PER_S
                regions.append(region.to_dict())
        return AccountingRecord(consumer_id, nbytes, nsamples, cpu, frozenset(lics), tuple(regions))


# -- sessions --------------------------------------------------------------

@dataclass
class QuerySession:
    session_id: str
    query: DataQuery
    sla: SlaContract
    consumer_topic: str
    matched_flows: Set[str]
    pipeline_ids: Set[str]
    created_ts: int
    consumer_host: str = CLOUD_ID
    token: Optional[AccessToken] = None
    closed_ts: Optional[int] = None

    @property
    def open(self) -> bool:
        return self.closed_ts is None


@dataclass
class _Route:
    """One session's use of one pipeline (host, data type)."""

    host_id: str
    spec: PipelineSpec
    pipeline_id: Optional[str] = None
    connected: bool = False
    flows: Set[str] = field(default_factory=set)
    held: Set[str] = field(default_factory=set)
    bridges: List[tuple] = field(default_factory=list)
    fork: Optional["Fork"] = None
    closed: bool = False
    retire_pending: bool = False


class Fork:
    """Per-session filter from a pipeline topic to the consumer topic."""

    def __init__(self, runtime: "_SessionRuntime", broker: Broker, topic: str):
        self.runtime = runtime
        token = broker.authority.issue_token([(topic, Mode.SUBSCRIBE)], PLATFORM_TOKEN_TTL_S)
        self.sub = broker.subscribe(token, topic, self._on_envelope, node=broker.name,
                                    name=f"fork:{runtime.session.session_id}")

    def _on_envelope(self, env: Envelope, ts: int) -> None:
        self.runtime.forward(env)

    def close(self) -> None:
        self.sub.close()
        self.sub.broker.authority.revoke(self.sub.token)


class _SessionRuntime:
    def __init__(self, session: QuerySession, broker: Broker, publish_token: AccessToken):
        self.session = session
        self.broker = broker
        self.publish_token = publish_token
        self.routes: Dict[Tuple[str, DataType], _Route] = {}
        self.licence_ids = frozenset(l.id for l in session.query.licences)
        self.last_seq: Dict[str, int] = {}
        self.forwarded = 0
        self.stale = 0
        self.geo_filtered = 0
        self.licence_filtered = 0
        self.closed = False

    def forward(self, env: Envelope) -> None:
        if self.closed or env.pseudo_id not in self.session.matched_flows:
            return
        if env.licence not in self.licence_ids:
            self.licence_filtered += 1
            return
        r = self.session.query.region
        if not (r.min_lat <= env.lat <= r.max_lat and r.min_lon <= env.lon <= r.max_lon):
            self.geo_filtered += 1
            return
        # per-flow order guard; also drops late samples of an older epoch
        last = self.last_seq.get(env.pseudo_id)
        if last is not None and env.seq <= last:
            self.stale += 1
            return
        self.last_seq[env.pseudo_id] = env.seq
        self.forwarded += 1
        self.broker.publish(self.publish_token, self.session.consumer_topic, env)


@dataclass
class _BridgeEntry:
    bridge: object
    dst_topic: str
    users: int = 0
    waiters: List[Callable] = field(default_factory=list)


class CloudNode:
    """Cloud services; hosts the cloud broker and the fallback ingest."""

    def __init__(self, scheduler, clock, authority, netem, id_seed: Optional[int] = None,
                 startup_delay_ms: float = DEFAULT_STARTUP_DELAY_MS,
                 bridge_setup_ms: float = DEFAULT_BRIDGE_SETUP_MS,
                 memory_bytes: int = 16 * 1024 ** 3, cost=None, trust=None, trust_checks: bool = True,
                 queue_limit: Optional[int] = None):
        self.scheduler = scheduler
        self.clock = clock
        self.authority = authority
        self.netem = netem
        self.startup_delay_ms = startup_delay_ms
        self.bridge_setup_ns = int(bridge_setup_ms * NS_PER_MS)
        kwargs = {"queue_limit": queue_limit} if queue_limit else {}
        self.broker = Broker(CLOUD_ID, scheduler, clock, authority, kind="cloud", **kwargs)
        self.ingest = PipelineHost(CLOUD_ID, self.broker, scheduler, clock, authority, capacity=1e9,
                                   memory_bytes=memory_bytes, netem=netem, cost=cost, trust=trust,
                                   trust_checks=trust_checks)
        self.inventory: Dict[str, EdgeRecord] = {}
        self.edges: Dict[str, EdgeNode] = {}
        self.minter = IdMinter(id_seed)
        self.catalogue = Catalogue(self.flow_quality)
        self._location: Dict[str, str] = {}
        self._attachment: Dict[str, Tuple[str, AccessToken]] = {}
        self.sessions: Dict[str, QuerySession] = {}
        self._runtime: Dict[str, _SessionRuntime] = {}
        self._session_ids = itertools.count(1)
        self._spec_users: Dict[Tuple[str, PipelineSpec], int] = defaultdict(int)
        self._bridges: Dict[tuple, _BridgeEntry] = {}
        self.ledger = AccountingLedger()
        self.control_log: List[Tuple[int, str, str, str]] = []

    # -- inventory and discovery ------------------------------------------
    def register_edge(self, edge: EdgeNode) -> str:
        area = edge.serving_area
        if edge.edge_id in self.inventory or edge.edge_id == CLOUD_ID:
            raise OverlapError(f"edge id {edge.edge_id} already registered")
        for rec in self.inventory.values():
            if rec.serving_area.overlaps(area):
                raise OverlapError(f"{edge.edge_id} overlaps {rec.edge_id}")
        self.inventory[edge.edge_id] = EdgeRecord(edge.edge_id, area, edge.endpoint, edge.capacity)
        self.edges[edge.edge_id] = edge
        logger.info("edge %s registered", edge.edge_id)
        return edge.edge_id

    def discover(self, position: GeoPoint) -> Discovery:
        for rec in self.inventory.values():
            if rec.serving_area.contains(position):
                return Discovery(rec.edge_id, rec.endpoint)
        return Discovery(CLOUD_ID, CLOUD_ENDPOINT)

    def host(self, host_id: str) -> PipelineHost:
        if host_id == CLOUD_ID:
            return self.ingest
        return self.edges[host_id]

    def broker_of(self, host_id: str) -> Broker:
        return self.host(host_id).broker

    # -- flows ------------------------------------------------------------
    def flow_quality(self, pseudo_id: str) -> Optional[float]:
        host_id = self._location.get(pseudo_id)
        if host_id is None:
            return None
        return self.host(host_id).flow_quality(pseudo_id)

    def register_flow(self, descriptor: ProducerDescriptor, device=None) -> FlowDescriptor:
        """Mint identities, list the flow and connect it (dormant) to its serving host."""
        flow_id, pseudo_id = self.minter.mint()
        flow = FlowDescriptor(flow_id, pseudo_id, descriptor.data_type, descriptor.licence,
                              descriptor.position, descriptor.nominal_rate, descriptor.producer_link)
        host_id = self.discover(descriptor.position).host_id
        topic, token = self.host(host_id).connect_flow(flow, device)
        self._location[pseudo_id] = host_id
        self._attachment[pseudo_id] = (topic, token)
        self.catalogue.add(flow)
        for rt in list(self._runtime.values()):
            if rt.session.query.matches(flow, self.catalogue.score(pseudo_id)):
                self._add_flow(rt, flow)
        return flow

    def attachment(self, pseudo_id: str) -> Tuple[PipelineHost, str, AccessToken]:
        host_id = self._location[pseudo_id]
        topic, token = self._attachment[pseudo_id]
        return self.host(host_id), topic, token

    def location(self, pseudo_id: str) -> str:
        return self._location[pseudo_id]

    def deregister_flow(self, pseudo_id: str) -> None:
        flow = self.catalogue.remove(pseudo_id)
        if flow is None:
            raise UnknownFlow(pseudo_id)
        for rt in self._runtime.values():
            if pseudo_id in rt.session.matched_flows:
                rt.session.matched_flows.discard(pseudo_id)
                route = rt.routes.get((self._location[pseudo_id], flow.data_type))
                if route is not None:
                    self._detach(rt, route, pseudo_id)
        host = self.host(self._location.pop(pseudo_id))
        dev = host.device(pseudo_id)
        if dev is not None:
            dev.deactivate(host.name)
        host.disconnect_flow(pseudo_id)
        topic, token = self._attachment.pop(pseudo_id)
        self.authority.revoke(token)

    def relocate_flow(self, pseudo_id: str, new_host_id: str, drain_ns: int = 0) -> Tuple[str, AccessToken]:
        """Move a flow's ingest to ``new_host_id`` (handover); the pseudo id is kept.

        Paths through the old host stay up for ``drain_ns`` so samples
        already in flight are still delivered.
        """
        flow = self.catalogue.flows.get(pseudo_id)
        if flow is None:
            raise UnknownFlow(pseudo_id)
        old_host_id = self._location[pseudo_id]
        if old_host_id == new_host_id:
            return self._attachment[pseudo_id]
        old_host = self.host(old_host_id)
        new_host = self.host(new_host_id)
        dev = old_host.device(pseudo_id)
        old_token = self._attachment[pseudo_id][1]
        topic, token = new_host.connect_flow(flow, dev)
        self._location[pseudo_id] = new_host_id
        self._attachment[pseudo_id] = (topic, token)
        old_routes = []
        for rt in self._runtime.values():
            if pseudo_id in rt.session.matched_flows:
                old = rt.routes.get((old_host_id, flow.data_type))
                if old is not None:
                    old_routes.append((rt, old))
                self._attach(rt, new_host_id, flow)

        def teardown():
            for rt, route in old_routes:
                if not rt.closed:
                    self._detach(rt, route, pseudo_id)
            old_host.disconnect_flow(pseudo_id)
            self.authority.revoke(old_token)

        self.scheduler.call_later(drain_ns, teardown, node=CLOUD_ID)
        return topic, token

    # -- catalogue --------------------------------------------------------
    def resolve_query(self, query: DataQuery) -> Set[FlowDescriptor]:
        return set(self.catalogue.resolve(query))

    # -- sessions ---------------------------------------------------------
    def open_session(self, query: DataQuery, sla: SlaContract, consumer_host: Optional[str] = None,
                     ttl: float = PLATFORM_TOKEN_TTL_S) -> QuerySession:
        """Open a standing query; the consumer subscribes to ``session.consumer_topic``.

        ``consumer_host`` is an edge id for a consumer running in that MEC,
        None for a cloud-hosted consumer.
        """
        now = self.clock.now()
        host_id = consumer_host or CLOUD_ID
        broker = self.broker_of(host_id)
        flows = self.catalogue.resolve(query)
        self._check_capacity(flows, sla)
        sid = f"q{next(self._session_ids)}"
        topic = broker.create_topic(consumer_topic(query.consumer_id, sid))
        token = self.authority.issue_token([(topic, Mode.SUBSCRIBE)], ttl)
        publish_token = self.authority.issue_token([(topic, Mode.PUBLISH)], PLATFORM_TOKEN_TTL_S)
        session = QuerySession(sid, query, sla, topic, set(), set(), now, host_id, token)
        rt = _SessionRuntime(session, broker, publish_token)
        self.sessions[sid] = session
        self._runtime[sid] = rt
        consumer_id = query.consumer_id
        broker.delivery_hooks[topic] = lambda env, ts: self.ledger.record_delivery(consumer_id, env, ts)
        self.ledger.session_opened(consumer_id, sid, now, sla.cpu_allocation, query.region,
                                   (l.id for l in query.licences))
        for flow in flows:
            self._add_flow(rt, flow)
        return session

    def _spec_for(self, data_type: DataType, sla: SlaContract) -> PipelineSpec:
        return PipelineSpec(data_type, default_policy(data_type), sla.max_rate, sla.cpu_allocation,
                            self.startup_delay_ms)

    def _check_capacity(self, flows: Iterable[FlowDescriptor], sla: SlaContract) -> None:
        need: Dict[str, Set[PipelineSpec]] = defaultdict(set)
        for f in flows:
            host_id = self._location[f.pseudo_id]
            if host_id != CLOUD_ID:
                spec = self._spec_for(f.data_type, sla)
                if self._spec_users[(host_id, spec)] == 0:
                    need[host_id].add(spec)
        for host_id, specs in need.items():
            total = sum(s.cpu_allocation for s in specs)
            rec = self.inventory[host_id]
            if total > rec.remaining + 1e-9:
                raise InsufficientEdgeCapacity(
                    f"{host_id}: SLA needs {total} units, {rec.remaining} remaining")

    def _add_flow(self, rt: _SessionRuntime, flow: FlowDescriptor) -> None:
        rt.session.matched_flows.add(flow.pseudo_id)
        self._attach(rt, self._location[flow.pseudo_id], flow)

    def _attach(self, rt: _SessionRuntime, host_id: str, flow: FlowDescriptor) -> None:
        key = (host_id, flow.data_type)
        route = rt.routes.get(key)
        if route is None:
            route = self._open_route(rt, host_id, flow.data_type, [flow.pseudo_id])
            if route is None:
                rt.session.matched_flows.discard(flow.pseudo_id)
            return
        if flow.pseudo_id in route.flows:
            return
        route.flows.add(flow.pseudo_id)
        host = self.host(host_id)

        def attached(reply, pid=flow.pseudo_id):
            if route.connected and not route.closed and pid in route.flows and pid not in route.held:
                route.held.add(pid)
                host.hold_activation(pid)

        if route.pipeline_id is None:
            # deploy order still in flight; it carries route.flows when it lands
            return
        self._send_control(host_id, "ATTACH_FLOWS",
                           {"pipeline_id": route.pipeline_id, "session": rt.session.session_id,
                            "flows": [flow.pseudo_id]}, attached)

    def _open_route(self, rt: _SessionRuntime, host_id: str, data_type: DataType,
                    flows: List[str]) -> Optional[_Route]:
        spec = self._spec_for(data_type, rt.session.sla)
        users = self._spec_users[(host_id, spec)]
        if host_id != CLOUD_ID and users == 0:
            rec = self.inventory[host_id]
            if spec.cpu_allocation > rec.remaining + 1e-9:
                logger.warning("%s: no capacity for session %s", host_id, rt.session.session_id)
                return None
            rec.allocated += spec.cpu_allocation
        self._spec_users[(host_id, spec)] = users + 1
        route = _Route(host_id, spec, flows=set(flows))
        rt.routes[(host_id, data_type)] = route
        host = self.host(host_id)
        sid = rt.session.session_id

        existing = host.find_pipeline(spec)
        if existing is not None and existing.running:
            # the pipeline already runs: only a new fork is needed, the order
            # below just registers this session with the edge
            route.pipeline_id = existing.pipeline_id
            rt.session.pipeline_ids.add(existing.pipeline_id)
            self._connect(rt, route, existing)

        def deployed(reply):
            pid = reply["pipeline_id"]
            if route.pipeline_id is None:
                route.pipeline_id = pid
                rt.session.pipeline_ids.add(pid)
            if host_id in self.inventory:
                self.inventory[host_id].deployed_pipelines.add(pid)
            inst = host.pipeline(pid)
            # reconcile flows added or dropped while the order was in flight
            for f in route.flows:
                if sid not in inst.flows.get(f, ()):
                    inst.attach(f, sid)
            for f in flows:
                if f not in route.flows:
                    inst.detach(f, sid)
            if route.closed:
                if route.retire_pending:
                    self._retire(rt, route, pid)
                return
            if not route.connected:
                inst.when_running(lambda inst: self._connect(rt, route, inst))
            else:
                for f in list(route.flows):
                    if f not in route.held:
                        route.held.add(f)
                        host.hold_activation(f)

        self._send_control(host_id, "DEPLOY_PIPELINE",
                           {"spec": spec.to_dict(), "session": sid, "flows": sorted(flows)}, deployed)
        return route

    def _send_control(self, host_id: str, verb: str, body: dict, on_reply: Optional[Callable] = None) -> None:
        """Deliver a control frame to a host after the cloud-to-edge link delay."""
        host = self.host(host_id)
        now = self.clock.now()
        self.control_log.append((now, host_id, verb, body.get("session", "")))
        arrival = now
        if host_id != CLOUD_ID:
            link = self.netem.link(CONTROL_PROFILE, f"control:{CLOUD_ID}->{host_id}")
            while True:
                t = link.transmit(now)
                if t is not None:
                    arrival = t
                    break
                now += 2 * int(link.profile.one_way_delay_ms * NS_PER_MS) + NS_PER_MS

        def land():
            reply = host.handle_control(verb, body)
            if on_reply is not None:
                on_reply(reply)

        self.scheduler.call_at(arrival, land, node=host_id)

    def _connect(self, rt: _SessionRuntime, route: _Route, inst: PipelineInstance) -> None:
        """Build the path pipeline -> consumer broker, then fork and wake producers."""
        if route.closed or route.connected or rt.closed:
            return
        host = self.host(route.host_id)
        cons = rt.broker
        src_topic = inst.output_topic
        dtype = route.spec.data_type.value

        def finish(topic: str):
            if route.closed or rt.closed or route.connected:
                return
            route.fork = Fork(rt, cons, topic)
            route.connected = True
            for f in sorted(route.flows):
                if f not in route.held and f in inst.flows:
                    route.held.add(f)
                    host.hold_activation(f)

        if host.broker is cons:
            finish(src_topic)
            return
        if host.broker is self.broker:
            relay = f"relay/{dtype}/{route.host_id}/{inst.pipeline_id}"
            self._ensure_bridge(route, self.broker, src_topic, cons, relay, finish)
            return
        cloud_topic = f"cloud/{dtype}/{route.host_id}/{inst.pipeline_id}"
        if cons is self.broker:
            self._ensure_bridge(route, host.broker, src_topic, self.broker, cloud_topic, finish)
            return
        relay = f"relay/{dtype}/{route.host_id}/{inst.pipeline_id}"
        self._ensure_bridge(
            route, host.broker, src_topic, self.broker, cloud_topic,
            lambda t: self._ensure_bridge(route, self.broker, t, cons, relay, finish))

    def _ensure_bridge(self, route: _Route, src: Broker, src_topic: str, dst: Broker, dst_topic: str,
                       then: Callable[[str], None]) -> None:
        key = (src.name, src_topic, dst.name)
        entry = self._bridges.get(key)
        if entry is None:
            dst.create_topic(validate_topic(dst_topic))

            def ready(b, key=key):
                e = self._bridges.get(key)
                if e is None:
                    return
                waiters, e.waiters = e.waiters, []
                for fn in waiters:
                    fn(e.dst_topic)

            entry = _BridgeEntry(None, dst_topic)
            self._bridges[key] = entry
            entry.bridge = bridge(src, src_topic, dst, dst_topic, self.netem, "BRIDGE",
                                  setup_ns=self.bridge_setup_ns, on_ready=ready)
        entry.users += 1
        route.bridges.append(key)
        if entry.bridge.ready:
            then(entry.dst_topic)
        else:
            entry.waiters.append(then)

    def _release_bridge(self, key) -> None:
        entry = self._bridges.get(key)
        if entry is None:
            return
        entry.users -= 1
        if entry.users <= 0:
            entry.bridge.close()
            self.authority.revoke(entry.bridge.token)
            dst = entry.bridge.dst
            if dst.has_topic(entry.dst_topic):
                dst.delete_topic(entry.dst_topic)
            del self._bridges[key]

    def _detach(self, rt: _SessionRuntime, route: _Route, pseudo_id: str) -> None:
        if pseudo_id not in route.flows:
            return
        route.flows.discard(pseudo_id)
        host = self.host(route.host_id)
        if pseudo_id in route.held:
            route.held.discard(pseudo_id)
            host.release_activation(pseudo_id)
        if route.pipeline_id is not None:
            self._send_control(route.host_id, "DETACH_FLOWS",
                               {"pipeline_id": route.pipeline_id, "session": rt.session.session_id,
                                "flows": [pseudo_id]})

    def close_session(self, session_id: str) -> AccountingRecord:
        try:
            rt = self._runtime.pop(session_id)
        except KeyError:
            raise UnknownSession(session_id) from None
        session = rt.session
        now = self.clock.now()
        rt.closed = True
        session.closed_ts = now
        for route in rt.routes.values():
            route.closed = True
            host = self.host(route.host_id)
            for f in sorted(route.held):
                host.release_activation(f)
            route.held.clear()
            if route.fork is not None:
                route.fork.close()
            for key in route.bridges:
                self._release_bridge(key)
            users_key = (route.host_id, route.spec)
            self._spec_users[users_key] -= 1
            if self._spec_users[users_key] == 0:
                del self._spec_users[users_key]
                if route.host_id in self.inventory:
                    self.inventory[route.host_id].allocated -= route.spec.cpu_allocation
            self._retire_when_known(rt, route)
        if rt.broker.has_topic(session.consumer_topic):
            rt.broker.delete_topic(session.consumer_topic)
        self.authority.revoke(session.token)
        self.authority.revoke(rt.publish_token)
        self.ledger.session_closed(session.query.consumer_id, session_id, now)
        return self.ledger.report(session.query.consumer_id, (session.created_ts, now + 1), now)

    def _retire_when_known(self, rt: _SessionRuntime, route: _Route) -> None:
        # the RETIRE order travels the same FIFO control link as the DEPLOY;
        # if the deploy has not landed yet, retire as soon as it does
        if route.pipeline_id is not None:
            self._retire(rt, route, route.pipeline_id)
        else:
            route.retire_pending = True

    def _retire(self, rt: _SessionRuntime, route: _Route, pipeline_id: str) -> None:
        host_id = route.host_id

        def done(reply):
            if reply.get("retired") and host_id in self.inventory:
                self.inventory[host_id].deployed_pipelines.discard(pipeline_id)

        self._send_control(host_id, "RETIRE_PIPELINE",
                           {"pipeline_id": pipeline_id, "session": rt.session.session_id,
                            "flows": sorted(route.flows)}, done)

    def session_runtime(self, session_id: str) -> _SessionRuntime:
        return self._runtime[session_id]

    # -- accounting -------------------------------------------------------
    def billing_report(self, consumer_id: str, window: Optional[Tuple[int, int]] = None) -> AccountingRecord:
        return self.ledger.report(consumer_id, window, self.clock.now())

    def consumer_egress_bytes(self) -> int:
        """Bytes handed to consumers on every consumer topic (for conservation checks)."""
        total = 0
        for b in [self.broker] + [e.broker for e in self.edges.values()]:
            for topic in b.topics():
                if topic.startswith("consumer/"):
                    total += sum(s.delivered_bytes for s in b.subscribers(topic))
        return total

    # -- telemetry --------------------------------------------------------
    def counters(self) -> dict:
        return {
            "edges": len(self.inventory),
            "flows": len(self.catalogue),
            "sessions": len(self._runtime),
            "bridges": len(self._bridges),
        }
