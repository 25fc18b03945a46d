import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crowdstream.domain import DataSample, DataType, GeoPoint
from crowdstream.quality import (REDUNDANCY, SPEED, FlowStats, QualityTracker, TrustConfig,
                                 plausibility_check, quality_score, update_stats)

NS = 1_000_000_000
MS = 1_000_000
HOME = GeoPoint(43.31, -1.98)


def sample(pid="p", seq=0, ts=0, pos=HOME):
    return DataSample(pid, seq, ts, pos, DataType.CITS, b"")


def offset(p, north_m=0.0, east_m=0.0):
    """Small planar displacement; independent of the library's geodesy."""
    dlat = north_m / 111_194.93
    dlon = east_m / (111_194.93 * math.cos(math.radians(p.lat)))
    return GeoPoint(p.lat + dlat, p.lon + dlon)


def np_haversine(a, b):
    la1, lo1, la2, lo2 = map(np.radians, (a.lat, a.lon, b.lat, b.lon))
    h = np.sin((la2 - la1) / 2) ** 2 + np.cos(la1) * np.cos(la2) * np.sin((lo2 - lo1) / 2) ** 2
    return 2 * 6_371_000 * np.arcsin(np.sqrt(h))


def feed(times_ns):
    s = FlowStats("p", 4.0)
    for i, t in enumerate(times_ns):
        update_stats(s, sample(seq=i, ts=t))
    return s


# -- statistics -----------------------------------------------------------------

def test_first_sample():
    s = feed([0])
    assert s.received == 1 and s.jitter_ms == 0.0


def test_regular_spacing_has_no_jitter():
    assert feed([i * 250 * MS for i in range(400)]).jitter_ms == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("n", [1_000, 10_000])
def test_streaming_jitter_matches_batch(n):
    rng = np.random.default_rng(n)
    gaps_ns = rng.integers(150 * MS, 350 * MS, size=n - 1)
    times = np.concatenate([[0], np.cumsum(gaps_ns)])
    s = feed(times.tolist())
    batch = np.std(np.diff(times) / 1e6)
    assert s.jitter_ms == pytest.approx(batch, rel=1e-9, abs=1e-9)
    assert s.mean_gap_ms == pytest.approx(np.mean(gaps_ns) / 1e6, rel=1e-12)


def test_arrival_times_drive_jitter_when_given():
    s = FlowStats("p", 4.0)
    for i, arr in enumerate([0, 100, 300, 600]):
        update_stats(s, sample(seq=i, ts=i * 250 * MS), arrival_ts=arr * MS)
    assert s.jitter_ms == pytest.approx(np.std([100, 200, 300]))


def test_mismatched_flow_rejected():
    with pytest.raises(ValueError):
        update_stats(FlowStats("p", 1.0), sample(pid="q"))


# -- plausibility ---------------------------------------------------------------

def test_speed_violation():
    s = feed([0])
    v = plausibility_check(s, sample(ts=NS, pos=offset(HOME, north_m=1000)), [], vmax=70)
    assert [x.kind for x in v] == [SPEED]


def test_stationary_ok():
    s = feed([0])
    assert plausibility_check(s, sample(ts=NS), [], vmax=70) == []


def test_vmax_must_be_positive():
    with pytest.raises(ValueError):
        plausibility_check(feed([0]), sample(ts=NS), [], vmax=0)


def test_redundancy_needs_quorum():
    s = feed([0])
    far = sample(ts=NS, pos=offset(HOME, east_m=3000))
    neighbours = [sample(pid=f"n{i}", ts=NS, pos=offset(HOME, north_m=20 * i)) for i in range(3)]
    kinds = {v.kind for v in plausibility_check(s, far, neighbours, vmax=1e6)}
    assert kinds == {REDUNDANCY}
    assert plausibility_check(s, far, neighbours[:2], vmax=1e6) == []


def _scene(steps=40, seed=0):
    """Five flows driving together plus one that keeps teleporting 5 km east."""
    rng = np.random.default_rng(seed)
    flows = {f"f{i}": offset(HOME, north_m=30 * i) for i in range(5)}
    flows["tele"] = offset(HOME, east_m=40)
    frames = []
    for k in range(steps):
        frame = {}
        for pid, base in flows.items():
            drift = offset(base, north_m=10.0 * k + rng.normal(0, 2), east_m=rng.normal(0, 2))
            if pid == "tele" and k % 2 == 1:
                drift = offset(drift, east_m=5000)
            frame[pid] = drift
        frames.append(frame)
    return frames


def _oracle(frames, cfg):
    """Brute-force per-sample violation flags, evaluated in feed order."""
    flagged = {pid: 0 for pid in frames[0]}
    latest = {}
    last = {}
    for k, frame in enumerate(frames):
        for pid, pos in frame.items():
            bad = False
            if pid in last:
                bad |= np_haversine(last[pid], pos) / 1.0 > cfg.vmax_mps
            anchor = last.get(pid, pos)
            wit = [q for o, (q, t) in latest.items()
                   if o != pid and abs(t - k) <= 1 and np_haversine(anchor, q) <= cfg.consensus_radius_m]
            if len(wit) >= cfg.quorum and all(np_haversine(q, pos) > cfg.disagreement_m for q in wit):
                bad = True
            flagged[pid] += bad
            last[pid] = pos
            latest[pid] = (pos, k)
    return flagged


def test_teleported_flow_is_the_only_violator():
    cfg = TrustConfig()
    frames = _scene()
    tracker = QualityTracker(cfg)
    for pid in frames[0]:
        tracker.track(pid, 1.0)
    for k, frame in enumerate(frames):
        for pid, pos in frame.items():
            tracker.observe(sample(pid, k, k * NS, pos))
    got = {pid: s.plausibility_violations for pid, s in tracker.stats.items()}
    assert got == _oracle(frames, cfg)
    assert {pid for pid, n in got.items() if n} == {"tele"}
    assert got["tele"] == len(frames) - 1
    assert tracker.stats["tele"].violation_kinds[REDUNDANCY] > 0


def test_disabled_tracker_flags_nothing():
    tracker = QualityTracker(enabled=False)
    tracker.track("tele", 1.0)
    for k, frame in enumerate(_scene(steps=6)):
        tracker.observe(sample("tele", k, k * NS, frame["tele"]))
    assert tracker.stats["tele"].plausibility_violations == 0


# -- scoring ---------------------------------------------------------------------

def test_lossless_score_is_one():
    s = feed([i * 250 * MS for i in range(401)])
    assert quality_score(s).score == 1.0


def test_small_loss_score():
    times = [i * 250 * MS for i in range(50_001)]
    kept = [t for i, t in enumerate(times) if i % 5000 != 2]  # 10 of 50,001 lost = 0.02%
    q = quality_score(feed(kept))
    assert q.availability == pytest.approx(1 - 10 / 50_001)
    assert q.score == pytest.approx(0.9999, abs=1e-4)


def test_half_loss_half_implausible():
    s = FlowStats("p", 1.0, received=50, first_ts=0, last_ts=99 * NS, plausibility_violations=25)
    assert s.expected() == 100
    assert quality_score(s).score == pytest.approx(0.5)


def test_expected_grows_with_now():
    s = feed([0, NS])
    assert quality_score(s, now=10 * NS).availability == pytest.approx(2 / 41)


def test_score_needs_samples():
    with pytest.raises(ValueError):
        quality_score(FlowStats("p", 1.0))


@given(st.integers(1, 500), st.integers(0, 500), st.integers(0, 500), st.integers(1, 100))
def test_score_monotone(received, missing, violations, extra):
    violations = min(violations, received)
    s = FlowStats("p", 1.0, received=received, first_ts=0,
                  last_ts=(received + missing - 1) * NS, plausibility_violations=violations)
    q = quality_score(s)
    assert 0.0 <= q.score <= 1.0
    worse = s.snapshot()
    worse.plausibility_violations = min(received, violations + 1)
    assert quality_score(worse).score <= q.score
    on_time = s.snapshot()
    update_stats(on_time, sample(seq=received, ts=s.last_ts + NS))
    assert quality_score(on_time).availability >= q.availability
