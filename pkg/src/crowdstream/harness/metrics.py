"""Measurement records and the 1 Hz resource sampler."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..netem import NS_PER_S

COUNT_KEYS = ("produced", "delivered", "loss", "sampling", "overflow", "geo")


@dataclass
class MetricsRecord:
    """Everything measured in one scenario run.

    ``delays_ms`` maps a consumer label to its per-sample delivery delays in
    delivery order; ``counts`` holds the conservation terms per consumer.
    """

    config: dict
    delays_ms: Dict[str, np.ndarray] = field(default_factory=dict)
    access_delays_ms: Dict[str, Optional[float]] = field(default_factory=dict)
    counts: Dict[str, Dict[str, int]] = field(default_factory=dict)
    resources: dict = field(default_factory=lambda: {"t_s": [], "cpu": {}, "ram": {}})
    ledger: Dict[str, dict] = field(default_factory=dict)
    pipelines: List[dict] = field(default_factory=list)
    invariants: Dict[str, bool] = field(default_factory=dict)
    diagnostics: List[str] = field(default_factory=list)
    wall_time_s: float = 0.0

    @property
    def ok(self) -> bool:
        return all(self.invariants.values())

    def all_delays_ms(self) -> np.ndarray:
        if not self.delays_ms:
            return np.empty(0)
        return np.concatenate([np.asarray(v, dtype=float) for v in self.delays_ms.values()])

    def median_ms(self) -> float:
        d = self.all_delays_ms()
        return float(np.median(d)) if d.size else float("nan")

    def percentile_ms(self, q: float) -> float:
        d = self.all_delays_ms()
        return float(np.percentile(d, q)) if d.size else float("nan")

    def tail_ratio(self) -> float:
        """p99 over median of the delivery delay."""
        return self.percentile_ms(99) / self.median_ms()

    def totals(self) -> Dict[str, int]:
        out = {k: 0 for k in COUNT_KEYS}
        for c in self.counts.values():
            for k in COUNT_KEYS:
                out[k] += c.get(k, 0)
        return out

    def to_json(self) -> str:
        """Record without the raw delays (those go to the CSV)."""
        d = asdict(self)
        d.pop("delays_ms")
        d["delay_counts"] = {k: int(len(v)) for k, v in self.delays_ms.items()}
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, delays_ms: Optional[Dict[str, np.ndarray]] = None) -> "MetricsRecord":
        d = json.loads(text)
        d.pop("delay_counts", None)
        rec = cls(**d)
        rec.delays_ms = delays_ms or {}
        return rec


class ResourceMonitor:
    """Samples CPU% and RAM% of each platform node once per (virtual) second.

    CPU% is the thread CPU time charged to the node's callbacks during the
    interval over the interval length; RAM% is the node's accounted memory
    over its capacity.
    """

    def __init__(self, platform, interval_s: float = 1.0, nodes: Optional[List[str]] = None):
        self.platform = platform
        self.interval_ns = int(interval_s * NS_PER_S)
        self.nodes = nodes or list(platform.nodes())
        self.series = {"t_s": [], "cpu": {n: [] for n in self.nodes}, "ram": {n: [] for n in self.nodes}}
        self._last_cpu = {}
        self._running = False

    def start(self) -> "ResourceMonitor":
        sched = self.platform.scheduler
        self._last_cpu = {n: sched.cpu_ns.get(n, 0) for n in self.nodes}
        self._running = True
        sched.call_later(self.interval_ns, self._sample)
        return self

    def stop(self) -> None:
        self._running = False

    def _sample(self) -> None:
        if not self._running:
            return
        sched = self.platform.scheduler
        hosts = self.platform.nodes()
        self.series["t_s"].append(sched.now() / NS_PER_S)
        for n in self.nodes:
            used = sched.cpu_ns.get(n, 0)
            self.series["cpu"][n].append(100.0 * (used - self._last_cpu[n]) / self.interval_ns)
            self._last_cpu[n] = used
            self.series["ram"][n].append(hosts[n].ram_percent())
        sched.call_later(self.interval_ns, self._sample)


def collect_resources(platform, interval_s: float = 1.0, nodes: Optional[List[str]] = None) -> ResourceMonitor:
    """Start sampling CPU%/RAM% of the platform nodes at ``1/interval_s`` Hz."""
    return ResourceMonitor(platform, interval_s, nodes).start()


def resource_trend(record: MetricsRecord, node: str, kind: str = "ram"):
    """Least-squares trend of a node's CPU% or RAM% series against time.

    Returns scipy's ``LinregressResult`` (slope in percentage points per
    second, with the two-sided p-value of the zero-slope hypothesis).
    """
    from scipy import stats

    t = np.asarray(record.resources["t_s"], dtype=float)
    y = np.asarray(record.resources[kind][node], dtype=float)
    if t.size < 3:
        raise ValueError("need at least three samples for a trend")
    return stats.linregress(t, y)
