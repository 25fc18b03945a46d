import random

import numpy as np
import pytest

from conftest import AREA_A, AREA_B, query, spawn
from crowdstream.broker import AuthDenied, Mode
from crowdstream.clients import Consumer, Producer, Vehicle
from crowdstream.domain import GeoPoint, GeoRegion, SlaContract
from crowdstream.mobility import CAST_TOPIC, SessionExists
from crowdstream.netem import NS_PER_MS, NS_PER_S

IN_A = GeoPoint(43.31, -1.98)
IN_A2 = GeoPoint(43.32, -1.96)
IN_B = GeoPoint(43.31, -1.86)
NOWHERE = GeoPoint(40.0, -3.7)
BOTH = GeoRegion(43.2, 43.4, -2.1, -1.8)


def rider(p, pos=IN_A, name="ue-1", sid=5):
    v = Vehicle(name, pos, sid)
    prod = Producer(p, v, "cits", "open", rng=random.Random(sid))
    prod.register()
    return v, prod, p.mobility.attach(v)


def gaps_around_handover(consumer, pseudo_id):
    env_ts = [(e.epoch, ts) for e, ts in zip(consumer.envelopes, consumer.consume_ts) if e.pseudo_id == pseudo_id]
    last_old = max(ts for ep, ts in env_ts if ep == 0)
    first_new = min(ts for ep, ts in env_ts if ep == 1)
    return first_new - last_old


def test_move_within_area(two_edges):
    v, prod, s = rider(two_edges)
    report = two_edges.mobility.move(s, IN_A2)
    assert not report.changed and s.epoch == 0 and s.current_edge == "mec-a"
    assert two_edges.cloud.location(prod.pseudo_id) == "mec-a"


def test_one_session_per_device(two_edges):
    v, _, _ = rider(two_edges)
    with pytest.raises(SessionExists):
        two_edges.mobility.attach(v)


def _handover_run(p, with_existing_b_flow):
    v, prod, s = rider(p)
    if with_existing_b_flow:
        rider(p, IN_B, "ue-2", 6)
    c = Consumer(p, "c1", keep_envelopes=True)
    c.open(query(region=BOTH), SlaContract(4))
    p.run_for(10)
    report = p.mobility.move(s, IN_B)
    p.run_for(10)
    return v, prod, s, c, report


def test_handover_to_fresh_edge(two_edges):
    v, prod, s, c, report = _handover_run(two_edges, False)
    assert report.changed and (report.old_host, report.new_host, report.epoch) == ("mec-a", "mec-b", 1)
    assert two_edges.cloud.location(prod.pseudo_id) == "mec-b"
    # pseudo id unchanged, epochs and seq monotone at the consumer
    assert {e.pseudo_id for e in c.envelopes} == {prod.pseudo_id}
    assert c.epoch_violations == 0 and c.order_violations == 0
    epochs = [e.epoch for e in c.envelopes]
    assert epochs == sorted(epochs) and set(epochs) == {0, 1}
    gap = gaps_around_handover(c, prod.pseudo_id)
    assert 0.9 * NS_PER_S <= gap <= 1.4 * NS_PER_S
    # old edge no longer serves the flow
    assert not any(prod.pseudo_id in inst.flows for inst in two_edges.edges["mec-a"].pipelines.values())


def test_handover_reusing_pipeline_is_faster(two_edges):
    _, prod, _, c, _ = _handover_run(two_edges, True)
    gap = gaps_around_handover(c, prod.pseudo_id)
    assert gap < 0.4 * NS_PER_S
    assert c.epoch_violations == 0


def test_cross_edge_paths_go_through_cloud(two_edges):
    _, _, _, c, _ = _handover_run(two_edges, True)
    assert c.paths
    for path in c.paths:
        assert path[-1] == "cloud"
        for a, b in zip(path, path[1:]):
            assert not (a != b and a.startswith("mec") and b.startswith("mec"))
        assert len({h for h in path if h.startswith("mec")}) == 1


def test_cloud_fallback(two_edges):
    v, prod, s = rider(two_edges)
    c = Consumer(two_edges, "c1", keep_envelopes=True)
    c.open(query(region=GeoRegion.everywhere()), SlaContract(4))
    two_edges.run_for(5)
    report = two_edges.mobility.move(s, NOWHERE)
    assert report.changed and report.cloud_fallback and report.new_host == "cloud"
    n = c.received
    two_edges.run_for(5)
    assert c.received > n
    assert any(e.epoch == 1 for e in c.envelopes)
    assert c.epoch_violations == 0


def test_epochs_strictly_increase(two_edges):
    v, prod, s = rider(two_edges)
    c = Consumer(two_edges, "c1", keep_envelopes=True)
    c.open(query(region=GeoRegion.everywhere()), SlaContract(4))
    seen = []
    for target in [IN_B, IN_A, NOWHERE, IN_B, IN_B, IN_A]:
        two_edges.run_for(3)
        r = two_edges.mobility.move(s, target)
        seen.append(r.epoch)
    two_edges.run_for(3)
    assert seen == [1, 2, 3, 4, 4, 5]
    assert c.epoch_violations == 0 and c.order_violations == 0
    assert {e.pseudo_id for e in c.envelopes} == {prod.pseudo_id}


# -- casting ------------------------------------------------------------------------

def fleet(p, n, rng):
    vs = []
    for i in range(n):
        pos = GeoPoint(rng.uniform(43.25, 43.37), rng.uniform(-2.05, -1.79))
        v = Vehicle(f"dev-{i}", pos, 100 + i)
        p.mobility.attach(v)
        vs.append(v)
    return vs


def test_cast_ten_devices_four_inside(two_edges):
    p = two_edges
    inside = [GeoPoint(43.30 + 0.005 * i, -1.97) for i in range(4)]
    outside = [GeoPoint(43.33, -1.86 + 0.005 * i) for i in range(6)]
    devices = []
    for i, pos in enumerate(inside + outside):
        v = Vehicle(f"d{i}", pos, i)
        p.mobility.attach(v)
        devices.append(v)
    roi = GeoRegion(43.29, 43.33, -1.99, -1.95)
    oracle = {v.device_id for v in devices if roi.min_lat <= v.position.lat <= roi.max_lat
              and roi.min_lon <= v.position.lon <= roi.max_lon}
    count = p.mobility.cast_event(p.mobility.issue_cast_token(), p.mobility.make_event(roi, b"ice ahead"))
    p.run_for(1)
    assert count == 4 == len(oracle)
    assert {v.device_id for v in devices if v.events} == oracle
    assert all(v.events[0][1] == b"ice ahead" for v in devices if v.events)


def test_cast_matches_brute_force_random():
    from crowdstream.edge import EdgeConfig
    from crowdstream.runtime import Platform
    rng = random.Random(99)
    p = Platform(seed=99)
    p.add_edge(EdgeConfig("mec-a", AREA_A))
    p.add_edge(EdgeConfig("mec-b", AREA_B))
    devices = fleet(p, 60, rng)
    token = p.mobility.issue_cast_token()
    for k in range(25):
        la, lb = sorted(rng.uniform(43.24, 43.38) for _ in range(2))
        oa, ob = sorted(rng.uniform(-2.06, -1.78) for _ in range(2))
        roi = GeoRegion(la, lb, oa, ob)
        before = {v.device_id: len(v.events) for v in devices}
        count = p.mobility.cast_event(token, p.mobility.make_event(roi, f"e{k}".encode()))
        p.run_for(1)
        got = {v.device_id for v in devices if len(v.events) > before[v.device_id]}
        lat = np.array([v.position.lat for v in devices])
        lon = np.array([v.position.lon for v in devices])
        mask = (lat >= la) & (lat <= lb) & (lon >= oa) & (lon <= ob)
        oracle = {devices[i].device_id for i in np.flatnonzero(mask)}
        assert got == oracle and count == len(oracle)


def test_cast_empty_and_everywhere(two_edges):
    p = two_edges
    devices = fleet(p, 8, random.Random(1))
    tok = p.mobility.issue_cast_token()
    assert p.mobility.cast_event(tok, p.mobility.make_event(GeoRegion(10, 11, 10, 11), b"x")) == 0
    assert p.mobility.cast_event(tok, p.mobility.make_event(GeoRegion.everywhere(), b"y")) == 8
    p.run_for(1)
    assert all(len(v.events) == 1 for v in devices)


def test_cast_requires_token(two_edges):
    p = two_edges
    fleet(p, 3, random.Random(2))
    ev = p.mobility.make_event(GeoRegion.everywhere(), b"z")
    wrong = p.authority.issue_token([(CAST_TOPIC, Mode.SUBSCRIBE)], 60)
    for tok in (None, wrong, p.mobility.issue_cast_token(ttl=0)):
        with pytest.raises(AuthDenied):
            p.mobility.cast_event(tok, ev)


def test_dormant_devices_tracked_by_beacon(two_edges):
    p = two_edges
    v = Vehicle("parked", IN_A, 1)
    Producer(p, v, "cits", "open").register()
    p.mobility.attach(v)
    v.position = IN_B  # towed without polling discovery
    tok = p.mobility.issue_cast_token()
    roi_b = GeoRegion(43.30, 43.32, -1.87, -1.85)
    assert p.mobility.cast_event(tok, p.mobility.make_event(roi_b, b"a")) == 0
    p.run_for(11)
    assert p.mobility.cast_event(tok, p.mobility.make_event(roi_b, b"b")) == 1


def test_positions_follow_uplink(two_edges):
    v, prod, s = rider(two_edges)
    c = Consumer(two_edges, "c1")
    c.open(query(region=BOTH), SlaContract(4))
    two_edges.run_for(3)
    v.position = IN_A2  # moved inside the same area; next samples carry the new geotag
    two_edges.run_for(1)
    assert two_edges.mobility.positions["ue-1"] == IN_A2
