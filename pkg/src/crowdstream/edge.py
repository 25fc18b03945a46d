"""Edge-side platform: ingest, on-demand pipelines and app quarantine.

A pipeline is an in-process task chain ``anonymise -> subsample -> forward``
deployed with an emulated start-up delay in place of a container start. It
processes the samples of every flow attached to it on a single FIFO server
whose service time depends on payload size and the contracted CPU
allocation, so heavier workloads queue up and stretch the delay tail.

``PipelineHost`` carries the machinery shared by edges and by the cloud's
fallback ingest (flows outside every edge serving area). ``EdgeNode`` adds
bootstrap, app admission and edge-local subscriptions.
"""
from __future__ import annotations

import dataclasses
import hashlib
import hmac
import itertools
import json
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Set

from .broker import (
    AccessToken, Broker, Envelope, Mode, TokenAuthority, UnknownTopic, producer_topic, validate_topic,
)
from .cam import CITS_PAYLOAD_BYTES, decode_cam, encode_cam
from .domain import DataSample, DataType, FlowDescriptor, GeoPoint, GeoRegion
from .netem import NS_PER_MS, NS_PER_S, VirtualScheduler
from .quality import QualityTracker, TrustConfig

logger = logging.getLogger(__name__)

DEFAULT_STARTUP_DELAY_MS = 800.0
PLATFORM_TOKEN_TTL_S = 365 * 86400


class EdgeError(Exception):
    pass


class CapacityExceeded(EdgeError):
    pass


class UnknownTransform(EdgeError):
    pass


class UnknownPipeline(EdgeError, KeyError):
    pass


class QuarantineError(EdgeError):
    pass


class SignatureInvalid(QuarantineError):
    pass


class TopicViolation(QuarantineError):
    pass


class BudgetViolation(QuarantineError):
    pass


# -- anonymisation ---------------------------------------------------------

def identity_with_marker(payload: bytes) -> bytes:
    return payload


MEDIA_TRANSFORMS: Dict[str, Callable[[bytes], bytes]] = {"identity": identity_with_marker}


def register_media_transform(name: str, fn: Callable[[bytes], bytes]) -> None:
    MEDIA_TRANSFORMS[name] = fn


@dataclass(frozen=True)
class AnonymisationPolicy:
    """What to strip from a sample.

    ``blacklist`` names CAM fields removed outright; fields in
    ``pseudonymise`` that survive the blacklist get their value replaced by
    the flow's pseudo id. Media payloads go through ``media_transform``.
    """

    blacklist: FrozenSet[str] = frozenset()
    pseudonymise: FrozenSet[str] = frozenset({"stationID"})
    media_transform: str = "identity"

    def to_dict(self) -> dict:
        return {
            "blacklist": sorted(self.blacklist),
            "pseudonymise": sorted(self.pseudonymise),
            "media_transform": self.media_transform,
        }

    @classmethod
    def from_dict(cls, d) -> "AnonymisationPolicy":
        return cls(frozenset(d.get("blacklist", ())), frozenset(d.get("pseudonymise", ("stationID",))),
                   d.get("media_transform", "identity"))


DEFAULT_CITS_POLICY = AnonymisationPolicy(blacklist=frozenset({"vin", "driverName"}))
DEFAULT_MEDIA_POLICY = AnonymisationPolicy()


def default_policy(data_type) -> AnonymisationPolicy:
    return DEFAULT_CITS_POLICY if DataType.parse(data_type) is DataType.CITS else DEFAULT_MEDIA_POLICY


def anonymise(sample: DataSample, policy: AnonymisationPolicy,
              transforms: Optional[Dict[str, Callable[[bytes], bytes]]] = None) -> DataSample:
    if sample.data_type is DataType.CITS:
        record = decode_cam(sample.payload)
        changed = False
        for name in policy.blacklist:
            if name in record:
                del record[name]
                changed = True
        for name in policy.pseudonymise:
            if name in record and record[name] != sample.pseudo_id:
                record[name] = sample.pseudo_id
                changed = True
        payload = sample.payload
        if changed:
            payload = encode_cam(record, max(len(sample.payload), CITS_PAYLOAD_BYTES))
        return sample.replace(payload=payload, anonymised=True)
    table = MEDIA_TRANSFORMS if transforms is None else transforms
    try:
        fn = table[policy.media_transform]
    except KeyError:
        raise UnknownTransform(policy.media_transform) from None
    return sample.replace(payload=fn(sample.payload), anonymised=True)


# -- subsampling -----------------------------------------------------------

class TokenBucket:
    """Burst-1 token bucket on production timestamps, exact rational arithmetic.

    Kept as a theoretical-arrival time (virtual scheduling form). A plain
    depth-1 bucket clips credit whenever the input period does not divide
    the token period (4/s in, 3/s allowed keeps only 2/s). Here a kept
    sample may carry over the credit of one recent inter-arrival gap, never
    a whole token: periodic input loses nothing, idle time banks nothing,
    and two samples with the same timestamp are never both kept.
    """

    def __init__(self, max_rate: float):
        if not max_rate > 0:
            raise ValueError("max_rate must be positive")
        self.rate = Fraction(str(max_rate))
        self.interval = Fraction(NS_PER_S) / self.rate
        self.tat: Optional[Fraction] = None
        self.last_ts: Optional[int] = None
        self.last_gap: Optional[int] = None

    def allow(self, ts: int) -> bool:
        gap = None if self.last_ts is None else max(0, ts - self.last_ts)
        gaps = [g for g in (gap, self.last_gap) if g is not None]
        if self.last_ts is None or ts >= self.last_ts:
            self.last_ts, self.last_gap = ts, gap
        if self.tat is not None and ts < self.tat:
            return False
        carry = min(Fraction(min(gaps)) if gaps else Fraction(0), max(Fraction(0), self.interval - 1))
        start = Fraction(ts) - carry
        self.tat = (start if self.tat is None else max(self.tat, start)) + self.interval
        return True


class SlaState:
    """Per-flow token buckets sharing one contracted ``max_rate``."""

    def __init__(self, max_rate: float):
        self.max_rate = max_rate
        self.buckets: Dict[str, TokenBucket] = {}

    def bucket(self, pseudo_id: str) -> TokenBucket:
        b = self.buckets.get(pseudo_id)
        if b is None:
            b = self.buckets[pseudo_id] = TokenBucket(self.max_rate)
        return b


def sample_gate(sample: DataSample, sla_state: SlaState) -> bool:
    """True to keep the sample, False to drop it."""
    return sla_state.bucket(sample.pseudo_id).allow(sample.produce_ts)


# -- pipelines -------------------------------------------------------------

@dataclass(frozen=True)
class ProcessingCost:
    """Service time model of a pipeline: fixed part plus per-KiB part, per CPU unit."""

    per_sample_us: Dict[str, float] = field(default_factory=lambda: {"cits": 100.0, "image": 300.0, "video": 300.0})
    per_kib_us: float = 40.0

    def service_ns(self, data_type: DataType, nbytes: int, cpu_allocation: float) -> int:
        us = self.per_sample_us.get(DataType.parse(data_type).value, 50.0) + self.per_kib_us * nbytes / 1024
        return int(us * 1000 / cpu_allocation)

    def __hash__(self):
        return hash((tuple(sorted(self.per_sample_us.items())), self.per_kib_us))


@dataclass(frozen=True)
class PipelineSpec:
    data_type: DataType
    policy: AnonymisationPolicy
    max_rate: float
    cpu_allocation: float
    startup_delay_ms: float = DEFAULT_STARTUP_DELAY_MS

    def __post_init__(self):
        object.__setattr__(self, "data_type", DataType.parse(self.data_type))
        if not self.max_rate > 0:
            raise ValueError("max_rate must be positive")
        if not self.cpu_allocation > 0:
            raise ValueError("cpu_allocation must be positive")
        if self.startup_delay_ms < 0:
            raise ValueError("startup_delay_ms must be >= 0")

    def to_dict(self) -> dict:
        return {
            "data_type": self.data_type.value,
            "policy": self.policy.to_dict(),
            "max_rate": self.max_rate,
            "cpu_allocation": self.cpu_allocation,
            "startup_delay_ms": self.startup_delay_ms,
        }

    @classmethod
    def from_dict(cls, d) -> "PipelineSpec":
        return cls(DataType.parse(d["data_type"]), AnonymisationPolicy.from_dict(d["policy"]),
                   float(d["max_rate"]), float(d["cpu_allocation"]),
                   float(d.get("startup_delay_ms", DEFAULT_STARTUP_DELAY_MS)))


STARTING, RUNNING, RETIRED = "starting", "running", "retired"


class PipelineInstance:
    def __init__(self, pipeline_id: str, spec: PipelineSpec, host: "PipelineHost"):
        self.pipeline_id = pipeline_id
        self.spec = spec
        self.host = host
        self.state = STARTING
        self.ref_count = 1
        self.in_samples = 0
        self.out_samples = 0
        self.dropped_by_sampling = 0
        self.dropped_overflow = 0
        self.anonymise_calls = 0
        self.busy_ns = 0
        self.output_topic = validate_topic(f"pipeline/{spec.data_type.value}/{host.name}/{pipeline_id}")
        self.sla = SlaState(spec.max_rate)
        self.flows: Dict[str, Set[str]] = {}
        self._subs: Dict[str, object] = {}
        self._backlog: deque = deque()
        self.backlog_bytes = 0
        self._busy = False
        self._on_running: List[Callable] = []
        self.token: Optional[AccessToken] = None

    @property
    def running(self) -> bool:
        return self.state == RUNNING

    def when_running(self, fn: Callable[["PipelineInstance"], None]) -> None:
        if self.state == RUNNING:
            fn(self)
        elif self.state == STARTING:
            self._on_running.append(fn)

    # flows are attached per session so the same flow can serve several
    def attach(self, pseudo_id: str, session_id: str) -> None:
        holders = self.flows.setdefault(pseudo_id, set())
        holders.add(session_id)
        if self.state == RUNNING:
            self._subscribe(pseudo_id)

    def detach(self, pseudo_id: str, session_id: str) -> bool:
        """Drop one holder; True when the flow is no longer served here."""
        holders = self.flows.get(pseudo_id)
        if holders is None:
            return True
        holders.discard(session_id)
        if holders:
            return False
        del self.flows[pseudo_id]
        sub = self._subs.pop(pseudo_id, None)
        if sub is not None:
            sub.close()
        return True

    def _subscribe(self, pseudo_id: str) -> None:
        if pseudo_id in self._subs:
            return
        topic = self.host.ingest_topic_of(pseudo_id)
        if topic is None:
            return
        self.token = self._ensure_token(topic)
        self._subs[pseudo_id] = self.host.broker.subscribe(
            self.token, topic, self._enqueue, node=self.host.name, name=f"pipeline:{self.pipeline_id}")

    def _ensure_token(self, topic: str) -> AccessToken:
        scope = {(topic, Mode.SUBSCRIBE), (self.output_topic, Mode.PUBLISH)}
        if self.token is not None:
            scope |= set(self.token.scope)
            if (topic, Mode.SUBSCRIBE) in self.token.scope:
                return self.token
        return self.host.authority.issue_token(scope, PLATFORM_TOKEN_TTL_S)

    def ingest_topic_changed(self, pseudo_id: str) -> None:
        sub = self._subs.pop(pseudo_id, None)
        if sub is not None:
            sub.close()
        if pseudo_id in self.flows and self.state == RUNNING:
            self._subscribe(pseudo_id)

    def _start(self) -> None:
        if self.state != STARTING:
            return
        self.state = RUNNING
        self.host.broker.create_topic(self.output_topic)
        self.token = self.host.authority.issue_token([(self.output_topic, Mode.PUBLISH)], PLATFORM_TOKEN_TTL_S)
        for pid in list(self.flows):
            self._subscribe(pid)
        callbacks, self._on_running = self._on_running, []
        for fn in callbacks:
            fn(self)

    def _enqueue(self, env: Envelope, ts: int) -> None:
        if self.state != RUNNING:
            return
        if len(self._backlog) >= self.host.queue_limit:
            self.dropped_overflow += 1
            return
        self._backlog.append(env)
        self.backlog_bytes += len(env.payload)
        if not self._busy:
            self._serve_next()

    def _serve_next(self) -> None:
        if not self._backlog:
            self._busy = False
            return
        self._busy = True
        env = self._backlog[0]
        service = self.host.cost.service_ns(env.data_type, len(env.payload), self.spec.cpu_allocation)
        self.busy_ns += service
        self.host.scheduler.call_later(service, self._complete, node=self.host.name)

    def _complete(self) -> None:
        if not self._backlog:
            self._busy = False
            return
        env = self._backlog.popleft()
        self.backlog_bytes -= len(env.payload)
        if self.state == RUNNING:
            self.process(env)
        self._serve_next()

    def process(self, env: Envelope) -> Optional[Envelope]:
        """anonymise -> subsample -> forward; returns the forwarded envelope."""
        self.in_samples += 1
        sample = env.to_sample()
        self.anonymise_calls += 1
        clean = anonymise(sample, self.spec.policy)
        if not sample_gate(clean, self.sla):
            self.dropped_by_sampling += 1
            return None
        self.out_samples += 1
        out = Envelope.from_sample(clean, env.licence, env.epoch)
        out = dataclasses.replace(out, path=env.path)
        self.host.broker.publish(self.token, self.output_topic, out)
        return out

    def _retire(self) -> None:
        self.state = RETIRED
        for sub in self._subs.values():
            sub.close()
        self._subs.clear()
        self._backlog.clear()
        self.backlog_bytes = 0
        self._on_running.clear()
        if self.host.broker.has_topic(self.output_topic):
            self.host.broker.delete_topic(self.output_topic)
        self.host.authority.revoke(self.token) if self.token is not None else None

    def counters(self) -> dict:
        return {
            "pipeline_id": self.pipeline_id,
            "state": self.state,
            "ref_count": self.ref_count,
            "in_samples": self.in_samples,
            "out_samples": self.out_samples,
            "dropped_by_sampling": self.dropped_by_sampling,
            "dropped_overflow": self.dropped_overflow,
            "anonymise_calls": self.anonymise_calls,
            "backlog": len(self._backlog),
        }


class PipelineHost:
    """Broker, flow ingest and pipeline management for one platform node."""

    BASELINE_BYTES = 512 * 1024 * 1024
    MAX_CONTROL_RETRIES = 50

    def __init__(self, name: str, broker: Broker, scheduler, clock, authority: TokenAuthority,
                 capacity: float, memory_bytes: int, netem=None, cost: Optional[ProcessingCost] = None,
                 trust: Optional[TrustConfig] = None, trust_checks: bool = True):
        self.name = name
        self.broker = broker
        self.scheduler = scheduler
        self.clock = clock
        self.authority = authority
        self.netem = netem
        self.capacity = float(capacity)
        self.allocated = 0.0
        self.memory_bytes = memory_bytes
        self.cost = cost or ProcessingCost()
        self.queue_limit = broker.queue_limit
        self.pipelines: Dict[str, PipelineInstance] = {}
        self._by_spec: Dict[PipelineSpec, str] = {}
        self._ids = itertools.count(1)
        self.flows: Dict[str, FlowDescriptor] = {}
        self._ingest: Dict[str, str] = {}
        self._devices: Dict[str, object] = {}
        self._activation: Dict[str, int] = {}
        self.on_position: Optional[Callable[[str, float, float], None]] = None
        self.quality = QualityTracker(trust or TrustConfig(), enabled=trust_checks)
        self.ingested = 0
        self.retired_pipelines: List[PipelineInstance] = []

    # -- capacity ---------------------------------------------------------
    @property
    def remaining_capacity(self) -> float:
        return self.capacity - self.allocated

    # -- pipelines --------------------------------------------------------
    def find_pipeline(self, spec: PipelineSpec) -> Optional[PipelineInstance]:
        pid = self._by_spec.get(spec)
        return self.pipelines.get(pid) if pid else None

    def deploy_pipeline(self, spec: PipelineSpec, on_running: Optional[Callable] = None) -> str:
        """Start (or reuse) the pipeline for ``spec``; it runs after the start-up delay."""
        existing = self.find_pipeline(spec)
        if existing is not None:
            existing.ref_count += 1
            if on_running is not None:
                existing.when_running(on_running)
            return existing.pipeline_id
        if spec.cpu_allocation > self.remaining_capacity + 1e-9:
            raise CapacityExceeded(
                f"{self.name}: need {spec.cpu_allocation} units, {self.remaining_capacity} remaining")
        pid = f"pl{next(self._ids)}"
        inst = PipelineInstance(pid, spec, self)
        self.pipelines[pid] = inst
        self._by_spec[spec] = pid
        self.allocated += spec.cpu_allocation
        if on_running is not None:
            inst.when_running(on_running)
        self.scheduler.call_later(int(spec.startup_delay_ms * NS_PER_MS), inst._start, node=self.name)
        logger.debug("%s: deploying %s for %s", self.name, pid, spec.data_type.value)
        return pid

    def pipeline(self, pipeline_id: str) -> PipelineInstance:
        try:
            return self.pipelines[pipeline_id]
        except KeyError:
            raise UnknownPipeline(pipeline_id) from None

    def retire_pipeline(self, pipeline_id: str) -> bool:
        """Drop one reference; True if the pipeline was actually retired."""
        inst = self.pipeline(pipeline_id)
        inst.ref_count -= 1
        if inst.ref_count > 0:
            return False
        inst._retire()
        del self.pipelines[pipeline_id]
        self._by_spec.pop(inst.spec, None)
        self.allocated -= inst.spec.cpu_allocation
        if abs(self.allocated) < 1e-9:
            self.allocated = 0.0
        self.retired_pipelines.append(inst)
        return True

    def handle_control(self, verb: str, body: dict) -> dict:
        """Control frames from the cloud.

        DEPLOY_PIPELINE and RETIRE_PIPELINE carry the ordering session and the
        flows it attaches or releases; ATTACH_FLOWS / DETACH_FLOWS adjust the
        flow set of a live pipeline for one session.
        """
        session = body.get("session", "")
        flows = body.get("flows", ())
        if verb == "DEPLOY_PIPELINE":
            pid = self.deploy_pipeline(PipelineSpec.from_dict(body["spec"]))
            for f in flows:
                self.pipelines[pid].attach(f, session)
            return {"pipeline_id": pid}
        if verb == "RETIRE_PIPELINE":
            inst = self.pipeline(body["pipeline_id"])
            for f in flows:
                inst.detach(f, session)
            return {"retired": self.retire_pipeline(body["pipeline_id"])}
        if verb == "ATTACH_FLOWS":
            inst = self.pipeline(body["pipeline_id"])
            for f in flows:
                inst.attach(f, session)
            return {"attached": len(flows)}
        if verb == "DETACH_FLOWS":
            inst = self.pipeline(body["pipeline_id"])
            for f in flows:
                inst.detach(f, session)
            return {"detached": len(flows)}
        raise ValueError(f"unknown control verb {verb}")

    # -- producer activation ------------------------------------------------
    def hold_activation(self, pseudo_id: str) -> None:
        """One more consumer path needs this flow; wake the producer on 0 -> 1."""
        n = self._activation.get(pseudo_id, 0)
        self._activation[pseudo_id] = n + 1
        if n == 0:
            self._signal_device(pseudo_id, True)

    def release_activation(self, pseudo_id: str) -> None:
        n = self._activation.get(pseudo_id, 0)
        if n <= 1:
            self._activation.pop(pseudo_id, None)
            if n == 1:
                self._signal_device(pseudo_id, False)
        else:
            self._activation[pseudo_id] = n - 1

    def is_active(self, pseudo_id: str) -> bool:
        return self._activation.get(pseudo_id, 0) > 0

    def _signal_device(self, pseudo_id: str, on: bool) -> None:
        dev = self._devices.get(pseudo_id)
        flow = self.flows.get(pseudo_id)
        if dev is None or flow is None:
            return
        now = self.clock.now()
        arrival = now
        if self.netem is not None:
            link = self.netem.link(flow.producer_link, f"control:{self.name}->{pseudo_id}")
            # control messages are retransmitted until they get through
            for attempt in range(self.MAX_CONTROL_RETRIES):
                t = link.transmit(now)
                if t is not None:
                    arrival = t
                    break
                now += 2 * int(link.profile.one_way_delay_ms * NS_PER_MS) + NS_PER_MS
            else:
                logger.error("%s: activation of %s never got through", self.name, pseudo_id)
                return
        fn = dev.activate if on else dev.deactivate
        self.scheduler.call_at(arrival, fn, self.name, node="producer")

    # -- ingest -----------------------------------------------------------
    def connect_flow(self, flow: FlowDescriptor, device=None) -> tuple:
        """Open the ingest topic for a flow; returns (topic, publish token)."""
        topic = producer_topic("ingest", flow.data_type, flow.tile, flow.pseudo_id)
        self.broker.create_topic(topic)
        self.flows[flow.pseudo_id] = flow
        self._ingest[flow.pseudo_id] = topic
        if device is not None:
            self._devices[flow.pseudo_id] = device
        self.quality.track(flow.pseudo_id, flow.nominal_rate)
        token = self.authority.issue_token([(topic, Mode.PUBLISH)], PLATFORM_TOKEN_TTL_S)
        for inst in self.pipelines.values():
            if flow.pseudo_id in inst.flows:
                inst.ingest_topic_changed(flow.pseudo_id)
        return topic, token

    def disconnect_flow(self, pseudo_id: str) -> None:
        self._activation.pop(pseudo_id, None)
        self.quality.forget(pseudo_id)
        topic = self._ingest.pop(pseudo_id, None)
        self.flows.pop(pseudo_id, None)
        self._devices.pop(pseudo_id, None)
        if topic is not None and self.broker.has_topic(topic):
            self.broker.delete_topic(topic)

    def flow_quality(self, pseudo_id: str) -> Optional[float]:
        now = self.clock.now() if self.is_active(pseudo_id) else None
        q = self.quality.score(pseudo_id, now)
        return None if q is None else q.score

    def ingest_topic_of(self, pseudo_id: str) -> Optional[str]:
        return self._ingest.get(pseudo_id)

    def device(self, pseudo_id: str):
        return self._devices.get(pseudo_id)

    def receive(self, token: AccessToken, topic: str, env: Envelope) -> None:
        """Producer uplink hand-off: update flow statistics, then publish."""
        self.ingested += 1
        if env.pseudo_id in self.quality.stats:
            self.quality.observe(env.to_sample(), self.clock.now())
        if self.on_position is not None:
            self.on_position(env.pseudo_id, env.lat, env.lon)
        self.broker.publish(token, topic, env)

    # -- telemetry --------------------------------------------------------
    def held_bytes(self) -> int:
        return self.broker.held_bytes() + sum(p.backlog_bytes for p in self.pipelines.values())

    def state_bytes(self) -> int:
        """Rough footprint of per-topic, per-subscriber, per-flow and per-pipeline state."""
        n_topics = len(self.broker.topics())
        n_subs = sum(len(self.broker.subscribers(t)) for t in self.broker.topics())
        return (n_topics * 1024 + n_subs * 2048 + len(self.flows) * 4096
                + len(self.pipelines) * 64 * 1024)

    def ram_percent(self) -> float:
        return 100.0 * (self.BASELINE_BYTES + self.state_bytes() + self.held_bytes()) / self.memory_bytes

    def counters(self) -> dict:
        return {
            "node": self.name,
            "capacity": self.capacity,
            "allocated": self.allocated,
            "ingested": self.ingested,
            "pipelines": [p.counters() for p in self.pipelines.values()],
        }


# -- app quarantine --------------------------------------------------------

@dataclass(frozen=True)
class AppManifest:
    app_id: str
    requested_topics: FrozenSet[str]
    declared_resource_budget: float
    signature: str = ""

    def canonical(self) -> bytes:
        return json.dumps(
            {"app_id": self.app_id, "requested_topics": sorted(self.requested_topics),
             "budget": self.declared_resource_budget},
            separators=(",", ":"), sort_keys=True,
        ).encode()


def sign_manifest(manifest: AppManifest, key: bytes) -> AppManifest:
    sig = hmac.new(key, manifest.canonical(), hashlib.sha256).hexdigest()
    return AppManifest(manifest.app_id, frozenset(manifest.requested_topics),
                       manifest.declared_resource_budget, sig)


def verify_manifest(manifest: AppManifest, key: bytes) -> bool:
    if not manifest.signature:
        return False
    expected = hmac.new(key, manifest.canonical(), hashlib.sha256).hexdigest()
    return hmac.compare_digest(expected, manifest.signature)


class AppContext:
    """What a CCAM app sees: subscribe to topics on the broker it is attached to."""

    def __init__(self, broker: Broker, token: AccessToken, allowed: FrozenSet[str], on_violation: Callable,
                 cpu_meter: Optional[dict] = None):
        self._broker = broker
        self._token = token
        self._allowed = allowed
        self._on_violation = on_violation
        self._cpu = cpu_meter
        self.subscriptions = []

    def now(self) -> int:
        return self._broker.clock.now()

    def subscribe(self, topic: str, callback: Callable, link=None):
        if topic not in self._allowed:
            self._on_violation(topic)
            raise TopicViolation(f"undeclared topic {topic}")
        cb = callback
        if self._cpu is not None:
            meter = self._cpu

            def cb(env, ts, _inner=callback):
                t0 = time.thread_time_ns()
                try:
                    _inner(env, ts)
                finally:
                    meter["ns"] += time.thread_time_ns() - t0
        sub = self._broker.subscribe(self._token, topic, cb, link=link, name="app")
        self.subscriptions.append(sub)
        return sub


@dataclass
class QuarantineReport:
    app_id: str
    admitted: bool
    reason: str = ""
    delivered: int = 0
    cpu_fraction: float = 0.0


def synthetic_sample(data_type: DataType, seq: int, ts: int, where: GeoPoint) -> Envelope:
    if data_type is DataType.CITS:
        payload = encode_cam({"stationID": 0, "synthetic": True, "seq": seq})
    else:
        payload = bytes(256)
    return Envelope("synthetic", seq, ts, where.lat, where.lon, data_type, True, "synthetic", payload)


def run_quarantine(app, manifest: AppManifest, duration_s: float = 5.0, rate: float = 10.0) -> QuarantineReport:
    """Run ``app`` against synthetic data on an isolated broker.

    The app's requested topics are recreated on a private broker with its
    own clock and fed synthetic samples. The app passes if it subscribes to
    nothing else and its callback CPU time stays within the declared budget
    (CPU units, 1.0 = one core, over the synthetic stream's duration).
    """
    sched = VirtualScheduler()
    authority = TokenAuthority(sched)
    sandbox = Broker(f"quarantine:{manifest.app_id}", sched, sched, authority, kind="edge")
    for topic in manifest.requested_topics:
        sandbox.create_topic(topic)
    token = authority.issue_token([(t, Mode.SUBSCRIBE) for t in manifest.requested_topics], duration_s + 60)
    violations = []
    meter = {"ns": 0}
    ctx = AppContext(sandbox, token, frozenset(manifest.requested_topics), violations.append, meter)
    try:
        app.start(ctx)
    except TopicViolation as exc:
        return QuarantineReport(manifest.app_id, False, str(exc))
    if violations:
        return QuarantineReport(manifest.app_id, False, f"undeclared topic {violations[0]}")
    feeder = authority.issue_token([(t, Mode.PUBLISH) for t in manifest.requested_topics], duration_s + 60)
    period = int(NS_PER_S / rate)
    n = int(duration_s * rate)
    where = GeoPoint(0.0, 0.0)
    for topic in sorted(manifest.requested_topics):
        dtype = DataType.CITS
        for part in topic.split("/"):
            if part in (d.value for d in DataType):
                dtype = DataType(part)
        for i in range(n):
            sched.call_at(i * period, lambda t=topic, i=i, d=dtype: sandbox.publish(
                feeder, t, synthetic_sample(d, i, sched.now(), where)))
    try:
        sched.run()
    except TopicViolation as exc:
        return QuarantineReport(manifest.app_id, False, str(exc))
    if violations:
        return QuarantineReport(manifest.app_id, False, f"undeclared topic {violations[0]}")
    delivered = sum(s.delivered for s in ctx.subscriptions)
    cpu_fraction = meter["ns"] / (duration_s * NS_PER_S)
    if cpu_fraction > manifest.declared_resource_budget:
        return QuarantineReport(manifest.app_id, False,
                                f"cpu {cpu_fraction:.4f} over budget {manifest.declared_resource_budget}",
                                delivered, cpu_fraction)
    return QuarantineReport(manifest.app_id, True, "", delivered, cpu_fraction)


# -- edge node -------------------------------------------------------------

@dataclass(frozen=True)
class EdgeConfig:
    edge_id: str
    serving_area: GeoRegion
    capacity: float = 36.0
    memory_bytes: int = 128 * 1024 ** 3
    endpoint: str = ""
    signing_key: bytes = b"edge-virtualisation-key"

    @property
    def address(self) -> str:
        return self.endpoint or f"inproc://{self.edge_id}"


class EdgeNode(PipelineHost):
    def __init__(self, config: EdgeConfig, scheduler, clock, authority: TokenAuthority, netem=None,
                 cost: Optional[ProcessingCost] = None, trust: Optional[TrustConfig] = None,
                 trust_checks: bool = True, queue_limit: Optional[int] = None):
        broker = Broker(config.edge_id, scheduler, clock, authority, kind="edge",
                        **({"queue_limit": queue_limit} if queue_limit else {}))
        super().__init__(config.edge_id, broker, scheduler, clock, authority, config.capacity,
                         config.memory_bytes, netem, cost, trust, trust_checks)
        self.config = config
        self.edge_id = config.edge_id
        self.registered = False
        self.apps: Dict[str, AppContext] = {}
        self.quarantine_reports: List[QuarantineReport] = []

    @property
    def serving_area(self) -> GeoRegion:
        return self.config.serving_area

    @property
    def endpoint(self) -> str:
        return self.config.address

    def bootstrap(self, cloud) -> "EdgeNode":
        """Stage 1 (stack up: broker is live once constructed) and stage 2 (join the platform)."""
        if cloud is None:
            raise EdgeError("cloud unreachable")
        cloud.register_edge(self)
        self.registered = True
        return self

    def admit_app(self, app, manifest: AppManifest) -> QuarantineReport:
        """Quarantine then admit a third-party app; raises on rejection."""
        if not verify_manifest(manifest, self.config.signing_key):
            report = QuarantineReport(manifest.app_id, False, "signature invalid")
            self.quarantine_reports.append(report)
            raise SignatureInvalid(manifest.app_id)
        report = run_quarantine(app, manifest)
        self.quarantine_reports.append(report)
        if not report.admitted:
            if report.reason.startswith("cpu"):
                raise BudgetViolation(report.reason)
            raise TopicViolation(report.reason)
        for topic in manifest.requested_topics:
            self.broker.create_topic(topic)
        token = self.authority.issue_token([(t, Mode.SUBSCRIBE) for t in manifest.requested_topics],
                                           PLATFORM_TOKEN_TTL_S)
        ctx = AppContext(self.broker, token, frozenset(manifest.requested_topics),
                         lambda topic: (_ for _ in ()).throw(TopicViolation(topic)))
        self.apps[manifest.app_id] = ctx
        app.start(ctx)
        return report
