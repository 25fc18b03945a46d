"""Wiring of one platform instance on a shared scheduler and clock."""
from __future__ import annotations

import logging
from typing import Dict, Optional

from .broker import TokenAuthority
from .cloud import CloudNode
from .edge import EdgeConfig, EdgeNode, ProcessingCost
from .mobility import MobilityManager
from .netem import NS_PER_S, Netem, PlatformClock, VirtualScheduler
from .quality import TrustConfig

logger = logging.getLogger(__name__)


class Platform:
    """Cloud, edges, mobility and network emulation sharing one virtual clock.

    >>> from crowdstream.domain import GeoPoint
    >>> p = Platform(seed=1)
    >>> p.cloud.discover(GeoPoint(0, 0)).host_id
    'cloud'
    """

    def __init__(self, seed: int = 0, profiles=None, startup_delay_ms: float = 800.0,
                 bridge_setup_ms: float = 150.0, cost: Optional[ProcessingCost] = None,
                 trust: Optional[TrustConfig] = None, trust_checks: bool = True,
                 beacon_interval_s: float = 10.0, queue_limit: Optional[int] = None,
                 deterministic_ids: bool = True, scheduler=None):
        self.seed = seed
        # a RealtimeScheduler here runs the platform on the host clock
        self.scheduler = scheduler if scheduler is not None else VirtualScheduler()
        self.clock = PlatformClock(self.scheduler)
        self.authority = TokenAuthority(self.clock)
        self.netem = Netem(seed, profiles)
        self.cost = cost or ProcessingCost()
        self.trust = trust or TrustConfig()
        self.trust_checks = trust_checks
        self.queue_limit = queue_limit
        self.cloud = CloudNode(self.scheduler, self.clock, self.authority, self.netem,
                               id_seed=seed if deterministic_ids else None,
                               startup_delay_ms=startup_delay_ms, bridge_setup_ms=bridge_setup_ms,
                               cost=self.cost, trust=self.trust, trust_checks=trust_checks,
                               queue_limit=queue_limit)
        self.edges: Dict[str, EdgeNode] = {}
        self.mobility = MobilityManager(self, beacon_interval_s)
        self.cloud.ingest.on_position = self.mobility.note_position

    def add_edge(self, config: EdgeConfig) -> EdgeNode:
        edge = EdgeNode(config, self.scheduler, self.clock, self.authority, self.netem, cost=self.cost,
                        trust=self.trust, trust_checks=self.trust_checks, queue_limit=self.queue_limit)
        edge.bootstrap(self.cloud)
        edge.on_position = self.mobility.note_position
        self.edges[config.edge_id] = edge
        return edge

    def nodes(self):
        return {"cloud": self.cloud.ingest, **self.edges}

    def run_for(self, seconds: float) -> None:
        self.scheduler.run_for(int(seconds * NS_PER_S))

    def run_until(self, t_ns: int) -> None:
        self.scheduler.run(t_ns)

    @property
    def now(self) -> int:
        return self.clock.now()
