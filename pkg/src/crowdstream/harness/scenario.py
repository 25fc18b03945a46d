"""Scenario configuration and the single-process scenario runner."""
from __future__ import annotations

import json
import logging
import random
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional

import numpy as np

from ..clients import NOMINAL_RATE, Consumer, Producer, Vehicle
from ..domain import DataQuery, DataType, GeoPoint, GeoRegion, SlaContract, licences
from ..edge import EdgeConfig
from ..netem import NS_PER_S, LinkProfile, derive_seed
from ..runtime import Platform
from .metrics import MetricsRecord, collect_resources

logger = logging.getLogger(__name__)

WORKLOAD_PRODUCERS = {
    DataType.CITS: {"low": 135, "medium": 250, "high": 400},
    DataType.IMAGE: {"low": 25, "medium": 50, "high": 70},
    DataType.VIDEO: {"low": 6, "medium": 10, "high": 20},
}
SERVING_AREA = GeoRegion(43.28, 43.34, -2.02, -1.94)
EDGE_ID = "mec-1"


class InvariantBreach(RuntimeError):
    pass


@dataclass
class ScenarioConfig:
    data_type: str = "cits"
    workload: str = "low"
    producer_link: str = "ETH"
    consumer_host: str = "MEC"
    duration_s: float = 60.0
    seed: int = 0
    sla: dict = field(default_factory=dict)
    fanout: int = 1
    producers: Optional[int] = None
    payload_scale: float = 0.1
    startup_delay_ms: float = 800.0
    bridge_setup_ms: float = 150.0
    drain_s: float = 5.0
    licence: str = "research-only"
    trust_checks: bool = True
    profiles: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        self.data_type = DataType.parse(self.data_type).value
        if self.workload not in ("low", "medium", "high"):
            raise ValueError(f"workload must be low, medium or high, not {self.workload!r}")
        if self.consumer_host not in ("MEC", "CLOUD"):
            raise ValueError("consumer_host must be MEC or CLOUD")
        if self.duration_s < 10:
            raise ValueError("duration_s must be at least 10 s")
        if self.fanout < 1:
            raise ValueError("fanout must be >= 1")
        if self.producers is not None and self.producers < 1:
            raise ValueError("producers must be >= 1")

    @property
    def dtype(self) -> DataType:
        return DataType(self.data_type)

    @property
    def n_producers(self) -> int:
        if self.producers is not None:
            return self.producers
        return WORKLOAD_PRODUCERS[self.dtype][self.workload]

    def sla_contract(self) -> SlaContract:
        return SlaContract(float(self.sla.get("max_rate", NOMINAL_RATE[self.dtype])),
                           float(self.sla.get("cpu_allocation", 1.0)))

    def label(self) -> str:
        return self.name or f"{self.data_type}-{self.workload}-{self.producer_link}-{self.consumer_host}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _platform_for(config: ScenarioConfig) -> Platform:
    profiles = {name: LinkProfile.from_dict({"name": name, **spec}) for name, spec in config.profiles.items()}
    return Platform(seed=config.seed, profiles=profiles, startup_delay_ms=config.startup_delay_ms,
                    bridge_setup_ms=config.bridge_setup_ms, trust_checks=config.trust_checks)


def spawn_producers(platform: Platform, config: ScenarioConfig, area: GeoRegion = SERVING_AREA) -> List[Producer]:
    """Register the workload's producers at random positions inside ``area`` (all dormant)."""
    rng = random.Random(derive_seed(config.seed, "producers"))
    out = []
    for i in range(config.n_producers):
        pos = GeoPoint(rng.uniform(area.min_lat, area.max_lat), rng.uniform(area.min_lon, area.max_lon))
        vehicle = Vehicle(f"veh-{i:04d}", pos, station_id=100000 + i)
        p = Producer(platform, vehicle, config.dtype, config.licence, producer_link=config.producer_link,
                     payload_scale=config.payload_scale, rng=rng)
        p.register()
        platform.mobility.attach(vehicle)
        out.append(p)
    return out


def _subscription_drops(platform: Platform):
    """(shared lost, shared overflow, per-label lost, per-label overflow) over live subscriptions."""
    shared_lost = shared_over = 0
    own_lost: Dict[str, int] = {}
    own_over: Dict[str, int] = {}
    for host in platform.nodes().values():
        b = host.broker
        for topic in b.topics():
            for s in b.subscribers(topic):
                if s.name.startswith(("pipeline:", "bridge:")):
                    shared_lost += s.lost
                    shared_over += s.overflow
                elif s.name.startswith(("fork:", "consumer:")):
                    key = s.name.split(":", 1)[1]
                    own_lost[key] = own_lost.get(key, 0) + s.lost
                    own_over[key] = own_over.get(key, 0) + s.overflow
    return shared_lost, shared_over, own_lost, own_over


def _isolated(path, edge_ids) -> bool:
    hops = [h for i, h in enumerate(path) if i == 0 or path[i - 1] != h]
    return not any(a in edge_ids and b in edge_ids for a, b in zip(hops, hops[1:]))


def measure(config: ScenarioConfig, platform: Platform, edge, consumers, produced: int,
            uplink_lost: int, rejected: int) -> MetricsRecord:
    """Conservation counts, delays and run invariants before teardown.

    ``consumers`` need the attributes of ``clients.Consumer`` that record
    what was handed over (received counts, order, licences, paths, delays).
    """
    rec = MetricsRecord(config=config.to_dict())
    pipelines = list(edge.pipelines.values())
    sampling = sum(pl.dropped_by_sampling for pl in pipelines)
    pipe_over = sum(pl.dropped_overflow for pl in pipelines)
    shared_lost, shared_over, own_lost, own_over = _subscription_drops(platform)
    conserved = True
    held = frozenset({config.licence})
    edge_ids = set(platform.edges)
    for c in consumers:
        sid = c.session.session_id
        rt = platform.cloud.session_runtime(sid)
        counts = {
            "produced": produced,
            "delivered": c.received,
            "loss": uplink_lost + rejected + shared_lost + own_lost.get(sid, 0) + own_lost.get(c.consumer_id, 0),
            "sampling": sampling,
            "overflow": pipe_over + shared_over + own_over.get(sid, 0) + own_over.get(c.consumer_id, 0),
            "geo": rt.geo_filtered,
        }
        rec.counts[c.consumer_id] = counts
        if counts["produced"] != counts["delivered"] + counts["loss"] + counts["sampling"] + \
                counts["overflow"] + counts["geo"]:
            conserved = False
            rec.diagnostics.append(f"{c.consumer_id}: counts not conserved {counts}")
        rec.delays_ms[c.consumer_id] = np.asarray(c.delays_ns, dtype=np.int64) / 1e6
        ad = c.access_delay_ns
        rec.access_delays_ms[c.consumer_id] = None if ad is None else ad / 1e6
    delays = rec.all_delays_ms()
    ledger_bytes = sum(platform.cloud.billing_report(c.consumer_id).bytes_delivered for c in consumers)
    rec.invariants = {
        "conservation": conserved,
        "delays_nonnegative": bool(delays.size == 0 or delays.min() >= 0),
        "fifo_per_flow": all(c.order_violations == 0 for c in consumers),
        "licence_soundness": all(c.licences_seen <= held for c in consumers),
        "process_once": all(pl.anonymise_calls == pl.in_samples and
                            pl.in_samples == pl.out_samples + pl.dropped_by_sampling for pl in pipelines),
        "access_delay_per_session": all(c.access_delay_ns is not None for c in consumers if c.received),
        "accounting_conservation": ledger_bytes == sum(c.received_bytes for c in consumers),
        "isolation": all(_isolated(path, edge_ids) for c in consumers for path in c.paths),
        "no_overflow": rec.totals()["overflow"] == 0,
    }
    rec.pipelines = [pl.counters() for pl in pipelines]
    return rec


def finalise(rec: MetricsRecord, platform: Platform, edge, monitor, wall0: float) -> None:
    """Teardown check, resource series and diagnostics (after sessions closed)."""
    rec.invariants["teardown"] = (not edge.pipelines and edge.allocated == 0.0 and
                                  not any(t.startswith("consumer/") for h in platform.nodes().values()
                                          for t in h.broker.topics()))
    rec.resources = monitor.series
    rec.wall_time_s = time.perf_counter() - wall0
    for name, ok in rec.invariants.items():
        if not ok:
            rec.diagnostics.append(f"invariant {name} violated")


def run_scenario(config: ScenarioConfig, strict: bool = False,
                 progress: Optional[Callable[[str], None]] = None) -> MetricsRecord:
    """Boot cloud + one edge, run the workload, tear down and measure.

    With ``strict`` any invariant breach raises ``InvariantBreach``;
    otherwise breaches are reported in ``record.invariants``.
    """
    wall0 = time.perf_counter()
    platform = _platform_for(config)
    edge = platform.add_edge(EdgeConfig(EDGE_ID, SERVING_AREA))
    producers = spawn_producers(platform, config)
    monitor = collect_resources(platform, nodes=["cloud", EDGE_ID])
    sla = config.sla_contract()
    host = EDGE_ID if config.consumer_host == "MEC" else None
    consumers = []
    for i in range(config.fanout):
        c = Consumer(platform, f"consumer-{i:03d}", host=host)
        c.open(DataQuery(c.consumer_id, SERVING_AREA, {config.dtype}, licences(config.licence)), sla)
        consumers.append(c)
    if progress:
        progress(f"{config.label()}: {len(producers)} producers, {len(consumers)} consumer(s)")
    platform.run_for(config.duration_s)
    for p in producers:
        p.stop()
    platform.run_for(config.drain_s)
    rec = measure(config, platform, edge, consumers,
                  produced=sum(p.produced for p in producers),
                  uplink_lost=sum(p.lost for p in producers),
                  rejected=sum(p.rejected for p in producers))
    for c in consumers:
        rec.ledger[c.consumer_id] = c.close().to_dict()
    platform.run_for(1.0)
    monitor.stop()
    finalise(rec, platform, edge, monitor, wall0)
    if strict and not rec.ok:
        raise InvariantBreach("; ".join(rec.diagnostics))
    return rec
