"""Per-flow statistics and redundancy-based plausibility scoring.

The score of a flow is the mean of two ratios:

* availability -- received samples over the samples the nominal rate says
  should have arrived, clamped to [0, 1];
* plausibility -- share of received samples that raised no violation.

Two violation detectors exist: a speed bound between consecutive positions
of one flow, and a redundancy check against nearby flows (if at least a
quorum of flows that sit where this flow was last seen all report positions
far from the new sample, the new sample is the odd one out).
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from .domain import DataSample, GeoPoint, haversine_m

NS_PER_S = 1_000_000_000

SPEED = "SPEED"
REDUNDANCY = "REDUNDANCY"


@dataclass(frozen=True)
class TrustConfig:
    vmax_mps: float = 70.0
    consensus_radius_m: float = 200.0
    disagreement_m: float = 1000.0
    quorum: int = 3
    overlap_ns: int = NS_PER_S
    w_availability: float = 0.5
    w_plausibility: float = 0.5

    def __post_init__(self):
        if self.vmax_mps <= 0:
            raise ValueError("vmax must be positive")
        if abs(self.w_availability + self.w_plausibility - 1.0) > 1e-12:
            raise ValueError("score weights must sum to 1")


DEFAULT_TRUST = TrustConfig()


@dataclass
class FlowStats:
    pseudo_id: str
    nominal_rate: float
    received: int = 0
    first_ts: Optional[int] = None
    last_ts: Optional[int] = None
    last_arrival: Optional[int] = None
    last_position: Optional[GeoPoint] = None
    plausibility_violations: int = 0
    violation_kinds: Dict[str, int] = field(default_factory=lambda: defaultdict(int))
    # Welford accumulators over inter-arrival gaps in ms
    _gaps: int = 0
    _gap_mean: float = 0.0
    _gap_m2: float = 0.0

    def expected(self, now: Optional[int] = None) -> float:
        if self.first_ts is None:
            return 0.0
        ref = self.last_ts if now is None else max(now, self.last_ts)
        return (ref - self.first_ts) / NS_PER_S * self.nominal_rate + 1.0

    @property
    def jitter_ms(self) -> float:
        """Population standard deviation of inter-arrival gaps."""
        if self._gaps == 0:
            return 0.0
        return math.sqrt(max(0.0, self._gap_m2 / self._gaps))

    @property
    def mean_gap_ms(self) -> float:
        return self._gap_mean

    def snapshot(self) -> "FlowStats":
        copy = FlowStats(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        copy.violation_kinds = defaultdict(int, self.violation_kinds)
        return copy


def update_stats(stats: FlowStats, sample: DataSample, arrival_ts: Optional[int] = None) -> FlowStats:
    """Fold one received sample into ``stats`` (updated in place and returned).

    Jitter is tracked over arrival times when ``arrival_ts`` is given, else
    over production timestamps.
    """
    if sample.pseudo_id != stats.pseudo_id:
        raise ValueError(f"sample of {sample.pseudo_id} fed to stats of {stats.pseudo_id}")
    t = sample.produce_ts if arrival_ts is None else arrival_ts
    if stats.last_arrival is not None:
        gap = (t - stats.last_arrival) / 1e6
        stats._gaps += 1
        delta = gap - stats._gap_mean
        stats._gap_mean += delta / stats._gaps
        stats._gap_m2 += delta * (gap - stats._gap_mean)
    stats.last_arrival = t
    stats.received += 1
    if stats.first_ts is None:
        stats.first_ts = sample.produce_ts
    stats.last_ts = sample.produce_ts if stats.last_ts is None else max(stats.last_ts, sample.produce_ts)
    stats.last_position = sample.geotag
    return stats


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str = ""


def plausibility_check(stats: FlowStats, sample: DataSample, neighbor_samples: Iterable[DataSample],
                       vmax: Optional[float] = None, config: TrustConfig = DEFAULT_TRUST) -> List[Violation]:
    """Violations raised by ``sample`` given the flow's history; empty list means ok.

    ``neighbor_samples`` are recent samples of other flows. Those within
    ``consensus_radius_m`` of this flow's last known position and within
    ``overlap_ns`` of the sample's timestamp form the consensus set.
    """
    vmax = config.vmax_mps if vmax is None else vmax
    if vmax <= 0:
        raise ValueError("vmax must be positive")
    found = []
    if stats.last_position is not None and stats.last_ts is not None:
        dt = (sample.produce_ts - stats.last_ts) / NS_PER_S
        if dt > 0:
            speed = haversine_m(stats.last_position, sample.geotag) / dt
            if speed > vmax:
                found.append(Violation(SPEED, f"{speed:.1f} m/s > {vmax} m/s"))
    anchor = stats.last_position if stats.last_position is not None else sample.geotag
    witnesses = {}
    for other in neighbor_samples:
        if other.pseudo_id == sample.pseudo_id:
            continue
        if abs(other.produce_ts - sample.produce_ts) > config.overlap_ns:
            continue
        if haversine_m(anchor, other.geotag) <= config.consensus_radius_m:
            prev = witnesses.get(other.pseudo_id)
            if prev is None or other.produce_ts > prev.produce_ts:
                witnesses[other.pseudo_id] = other
    if len(witnesses) >= config.quorum and all(
        haversine_m(w.geotag, sample.geotag) > config.disagreement_m for w in witnesses.values()
    ):
        found.append(Violation(REDUNDANCY, f"{len(witnesses)} neighbours disagree"))
    return found


@dataclass(frozen=True)
class QualityScore:
    score: float
    availability: float
    plausibility: float


def _clamp(x: float) -> float:
    return min(1.0, max(0.0, x))


def quality_score(stats: FlowStats, now: Optional[int] = None, config: TrustConfig = DEFAULT_TRUST) -> QualityScore:
    if stats.received == 0:
        raise ValueError("quality score needs at least one received sample")
    availability = _clamp(stats.received / stats.expected(now))
    plausibility = _clamp(1.0 - stats.plausibility_violations / stats.received)
    score = config.w_availability * availability + config.w_plausibility * plausibility
    return QualityScore(_clamp(score), availability, plausibility)


class QualityTracker:
    """Ingest-side bookkeeping: one FlowStats per flow plus a coarse spatial index.

    The index buckets the latest sample of each flow into cells of roughly
    the consensus radius so the redundancy check only scans nearby flows.
    """

    CELL_DEG = 0.002

    def __init__(self, config: TrustConfig = DEFAULT_TRUST, enabled: bool = True):
        self.config = config
        self.enabled = enabled
        self.stats: Dict[str, FlowStats] = {}
        self._latest: Dict[str, DataSample] = {}
        self._cell_of: Dict[str, Tuple[int, int]] = {}
        self._cells: Dict[Tuple[int, int], set] = defaultdict(set)

    def track(self, pseudo_id: str, nominal_rate: float) -> FlowStats:
        st = self.stats.get(pseudo_id)
        if st is None:
            st = self.stats[pseudo_id] = FlowStats(pseudo_id, nominal_rate)
        return st

    def forget(self, pseudo_id: str) -> None:
        self.stats.pop(pseudo_id, None)
        self._latest.pop(pseudo_id, None)
        cell = self._cell_of.pop(pseudo_id, None)
        if cell is not None:
            self._cells[cell].discard(pseudo_id)

    def _cell(self, p: GeoPoint) -> Tuple[int, int]:
        return (math.floor(p.lat / self.CELL_DEG), math.floor(p.lon / self.CELL_DEG))

    def neighbours(self, around: GeoPoint) -> List[DataSample]:
        ci, cj = self._cell(around)
        radius = self.config.consensus_radius_m
        cell_lat_m = self.CELL_DEG * 111_195.0
        cell_lon_m = cell_lat_m * max(math.cos(math.radians(around.lat)), 1e-6)
        span_i = math.ceil(radius / cell_lat_m)
        span_j = min(math.ceil(radius / cell_lon_m), int(360 / self.CELL_DEG))
        out = []
        for di in range(-span_i, span_i + 1):
            for dj in range(-span_j, span_j + 1):
                for pid in self._cells.get((ci + di, cj + dj), ()):
                    out.append(self._latest[pid])
        return out

    def observe(self, sample: DataSample, arrival_ts: Optional[int] = None) -> List[Violation]:
        st = self.stats.get(sample.pseudo_id)
        if st is None:
            raise KeyError(f"untracked flow {sample.pseudo_id}")
        violations: List[Violation] = []
        if self.enabled:
            anchor = st.last_position if st.last_position is not None else sample.geotag
            violations = plausibility_check(st, sample, self.neighbours(anchor), config=self.config)
            if violations:
                st.plausibility_violations += 1
                for v in violations:
                    st.violation_kinds[v.kind] += 1
        update_stats(st, sample, arrival_ts)
        self._latest[sample.pseudo_id] = sample
        cell = self._cell(sample.geotag)
        old = self._cell_of.get(sample.pseudo_id)
        if old != cell:
            if old is not None:
                self._cells[old].discard(sample.pseudo_id)
            self._cells[cell].add(sample.pseudo_id)
            self._cell_of[sample.pseudo_id] = cell
        return violations

    def score(self, pseudo_id: str, now: Optional[int] = None) -> Optional[QualityScore]:
        st = self.stats.get(pseudo_id)
        if st is None or st.received == 0:
            return None
        return quality_score(st, now, self.config)
