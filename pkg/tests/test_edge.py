import math
import time
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from conftest import AREA_A, query, spawn
from crowdstream.cam import decode_cam, encode_cam, make_cam
from crowdstream.clients import Consumer
from crowdstream.domain import DataSample, DataType, GeoPoint, SlaContract
from crowdstream.edge import (AnonymisationPolicy, AppManifest, BudgetViolation, CapacityExceeded, EdgeConfig,
                              EdgeError, PipelineSpec, SignatureInvalid, SlaState, TokenBucket, TopicViolation,
                              UnknownTransform, anonymise, default_policy, register_media_transform, sample_gate,
                              sign_manifest, verify_manifest)
from crowdstream.cloud import OverlapError
from crowdstream.netem import NS_PER_MS, NS_PER_S

KEY = b"edge-virtualisation-key"
POS = GeoPoint(43.3, -1.98)


def cits(payload_record, pid="ps-1"):
    return DataSample(pid, 7, 123, POS, DataType.CITS, encode_cam(payload_record))


# -- bootstrap -------------------------------------------------------------------

def test_bootstrap_registers_with_cloud(platform):
    edge = platform.edges["mec-a"]
    assert edge.registered and "mec-a" in platform.cloud.edges
    assert edge.pipelines == {}


def test_duplicate_bootstrap_rejected(platform):
    with pytest.raises(OverlapError):
        platform.add_edge(EdgeConfig("mec-dup", AREA_A))


def test_bootstrap_without_cloud():
    from crowdstream.runtime import Platform
    p = Platform(seed=1)
    edge = p.add_edge(EdgeConfig("x", AREA_A))
    with pytest.raises(EdgeError):
        edge.bootstrap(None)


# -- anonymisation ------------------------------------------------------------------

def test_blacklisted_station_id_removed():
    out = anonymise(cits(make_cam(42, 43.3, -1.98)), AnonymisationPolicy(blacklist=frozenset({"stationID"})))
    assert "stationID" not in decode_cam(out.payload)
    assert out.anonymised and (out.seq, out.produce_ts, out.geotag) == (7, 123, POS)


def test_station_id_pseudonymised_by_default():
    sample = cits(make_cam(42, 43.3, -1.98, vin="VIN1", driverName="Ann"))
    rec = decode_cam(anonymise(sample, default_policy("cits")).payload)
    assert rec["stationID"] == "ps-1"
    assert "vin" not in rec and "driverName" not in rec
    assert rec["speed"] == 0 and rec["latitude"] == 433000000


def test_empty_policy_is_byte_identical():
    sample = cits(make_cam(42, 43.3, -1.98))
    out = anonymise(sample, AnonymisationPolicy(blacklist=frozenset(), pseudonymise=frozenset()))
    assert out.payload == sample.payload and out.anonymised


def test_empty_blacklist_on_already_pseudonymous_record():
    sample = cits({"stationID": "ps-1", "speed": 3})
    out = anonymise(sample, AnonymisationPolicy())
    assert out.payload == sample.payload and out.anonymised


def test_cits_payload_size_kept():
    sample = cits(make_cam(42, 43.3, -1.98, vin="VIN00000000000042"))
    assert len(anonymise(sample, default_policy("cits")).payload) == len(sample.payload)


@pytest.mark.parametrize("dt", [DataType.IMAGE, DataType.VIDEO])
def test_media_default_transform(dt):
    sample = DataSample("ps-1", 1, 5, POS, dt, bytes(range(256)) * 10)
    out = anonymise(sample, default_policy(dt))
    assert out.anonymised and len(out.payload) == len(sample.payload)


def test_media_transform_registry():
    register_media_transform("blank", lambda b: bytes(len(b)))
    sample = DataSample("ps-1", 1, 5, POS, DataType.IMAGE, b"\x01\x02")
    assert anonymise(sample, AnonymisationPolicy(media_transform="blank")).payload == b"\x00\x00"
    with pytest.raises(UnknownTransform):
        anonymise(sample, AnonymisationPolicy(media_transform="blur-faces"))


# -- subsampling -----------------------------------------------------------------

def kept(n, rate, max_rate, start=0):
    bucket = TokenBucket(max_rate)
    period = Fraction(NS_PER_S) / Fraction(str(rate))
    return [bucket.allow(start + int(i * period)) for i in range(n)]


def test_video_every_second_frame():
    assert kept(20, 10, 5) == [True, False] * 10


def test_cits_identity():
    assert all(kept(1000, 4, 4))


def test_image_quarter():
    flags = kept(1000, 2, 0.5)
    assert abs(sum(flags) - 250) <= 1
    assert flags[:8] == [True, False, False, False] * 2


def test_sample_gate_is_per_flow():
    sla = SlaState(5)
    a = [sample_gate(DataSample("a", i, i * 100 * NS_PER_MS, POS, DataType.VIDEO, b""), sla) for i in range(10)]
    b = [sample_gate(DataSample("b", i, i * 100 * NS_PER_MS, POS, DataType.VIDEO, b""), sla) for i in range(10)]
    assert a == b and sum(a) == 5


@given(st.integers(1, 3000), st.sampled_from([1, 2, 4, 10, 25, 30]), st.sampled_from([0.1, 0.5, 1, 2, 3, 5, 10, 30]),
       st.integers(0, 10**12))
def test_sampling_count_bound(n, rate, max_rate, start):
    expected = math.floor(n * Fraction(str(max_rate)) / rate) if max_rate < rate else n
    assert abs(sum(kept(n, rate, max_rate, start)) - expected) <= 1


@given(st.lists(st.integers(0, 2 * NS_PER_S), min_size=1, max_size=200), st.sampled_from([0.5, 1, 3, 5, 10]))
def test_bucket_never_bursts(gaps, max_rate):
    """Any arrival pattern: at most 1 + m*L + (less than one token) kept in a window of length L."""
    bucket = TokenBucket(max_rate)
    ts, t = [], 0
    for g in gaps:
        t += g
        ts.append(t)
    kept = [x for x in ts if bucket.allow(x)]
    assert len(kept) == len(set(kept))
    biggest_gap = max(gaps[1:], default=0)
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            window_s = Fraction(kept[j] - kept[i], NS_PER_S)
            n = j - i + 1
            assert n < 2 + max_rate * window_s
            assert n <= 1 + Fraction(str(max_rate)) * (window_s + Fraction(biggest_gap, NS_PER_S))


def test_idle_banks_no_burst():
    bucket = TokenBucket(3)
    for i in range(8):
        bucket.allow(i * 250 * NS_PER_MS)
    t = 100 * NS_PER_S
    assert bucket.allow(t)
    # a burst right after a long pause gets one sample through, not two
    assert not bucket.allow(t + 1)
    assert not bucket.allow(t + 10 * NS_PER_MS)


def test_bucket_rejects_bad_rate():
    with pytest.raises(ValueError):
        TokenBucket(0)


# -- pipelines ------------------------------------------------------------------------

def spec(**kw):
    base = dict(data_type="cits", policy=default_policy("cits"), max_rate=4, cpu_allocation=1)
    return PipelineSpec(**{**base, **kw})


def test_deploy_reuse_and_retire(platform):
    edge = platform.edges["mec-a"]
    cap = edge.remaining_capacity
    a = edge.deploy_pipeline(spec())
    b = edge.deploy_pipeline(spec())
    assert a == b and edge.pipeline(a).ref_count == 2
    assert edge.remaining_capacity == cap - 1
    assert edge.retire_pipeline(a) is False
    assert edge.retire_pipeline(a) is True
    assert edge.remaining_capacity == cap


def test_capacity_exceeded(platform):
    edge = platform.edges["mec-a"]
    edge.deploy_pipeline(spec(cpu_allocation=edge.capacity - 4))
    assert edge.remaining_capacity == 4
    with pytest.raises(CapacityExceeded):
        edge.deploy_pipeline(spec(cpu_allocation=10, max_rate=2))


def test_pipeline_state_transitions(platform):
    edge = platform.edges["mec-a"]
    pid = edge.deploy_pipeline(spec(startup_delay_ms=800))
    inst = edge.pipeline(pid)
    platform.run_for(0.799)
    assert inst.state == "starting"
    platform.run_for(0.002)
    assert inst.state == "running"
    edge.retire_pipeline(pid)
    assert inst.state == "retired"


def test_control_verbs(platform):
    edge = platform.edges["mec-a"]
    reply = edge.handle_control("DEPLOY_PIPELINE", {"spec": spec().to_dict(), "flows": [], "session": "s"})
    assert edge.handle_control("RETIRE_PIPELINE", {"pipeline_id": reply["pipeline_id"]}) == {"retired": True}
    with pytest.raises(ValueError):
        edge.handle_control("REBOOT", {})


def test_spec_validation():
    for bad in (dict(max_rate=0), dict(cpu_allocation=0), dict(startup_delay_ms=-1)):
        with pytest.raises(ValueError):
            spec(**bad)
    assert PipelineSpec.from_dict(spec().to_dict()) == spec()


def test_first_sample_not_before_startup_delay(platform):
    spawn(platform, 3)
    c = Consumer(platform, "c1", host="mec-a")
    session = c.open(query(), SlaContract(4))
    platform.run_for(3)
    assert c.received > 0
    assert c.first_delivery_ts - session.created_ts >= 800 * NS_PER_MS


def test_process_once_and_conservation(platform):
    prods = spawn(platform, 4)
    consumers = [Consumer(platform, f"c{i}", host="mec-a") for i in range(5)]
    for c in consumers:
        c.open(query(c.consumer_id), SlaContract(4))
    platform.run_for(10)
    for p in prods:
        p.stop()
    platform.run_for(1)
    edge = platform.edges["mec-a"]
    (inst,) = edge.pipelines.values()
    produced = sum(p.produced for p in prods)
    assert produced > 100
    assert inst.ref_count == 5
    assert inst.anonymise_calls == inst.in_samples == produced
    assert inst.in_samples == inst.out_samples + inst.dropped_by_sampling
    assert all(c.received == produced for c in consumers)


# -- quarantine -------------------------------------------------------------------------

LIVE = "local/cits/ezjm/app"


class GoodApp:
    def __init__(self):
        self.seen = 0

    def start(self, ctx):
        ctx.subscribe(LIVE, lambda env, ts: setattr(self, "seen", self.seen + 1))


class NosyApp(GoodApp):
    def start(self, ctx):
        super().start(ctx)
        ctx.subscribe("local/cits/ezjm/other", lambda env, ts: setattr(self, "seen", self.seen + 1))


class LateNosyApp:
    """Behaves at start, then reaches for an undeclared topic when data flows."""

    def __init__(self):
        self.ctx = None
        self.seen = 0

    def start(self, ctx):
        self.ctx = ctx
        ctx.subscribe(LIVE, self.on)

    def on(self, env, ts):
        self.seen += 1
        self.ctx.subscribe("ingest/cits/ezjm/ps-secret", self.on)


class HungryApp(GoodApp):
    def start(self, ctx):
        def burn(env, ts):
            t0 = time.thread_time()
            while time.thread_time() - t0 < 0.002:
                pass
        ctx.subscribe(LIVE, burn)


def manifest(budget=0.5, topics=(LIVE,)):
    return sign_manifest(AppManifest("app-1", frozenset(topics), budget), KEY)


def test_well_behaved_app_admitted(platform):
    edge = platform.edges["mec-a"]
    app = GoodApp()
    report = edge.admit_app(app, manifest())
    assert report.admitted and report.delivered == 50
    assert app.seen == 50  # synthetic data only so far
    tok = platform.authority.issue_token([(LIVE, "publish")], 60)
    edge.broker.publish(tok, LIVE, _env())
    platform.run_for(0.01)
    assert app.seen == 51


def _env():
    from crowdstream.broker import Envelope
    return Envelope("ps-1", 1, 0, 43.3, -1.98, DataType.CITS, True, "open", b"{}")


@pytest.mark.parametrize("cls", [NosyApp, LateNosyApp])
def test_undeclared_topic_rejected(platform, cls):
    edge = platform.edges["mec-a"]
    app = cls()
    with pytest.raises(TopicViolation):
        edge.admit_app(app, manifest())
    assert "app-1" not in edge.apps
    assert not edge.broker.has_topic(LIVE)


def test_bad_signature_rejected(platform):
    edge = platform.edges["mec-a"]
    m = manifest()
    forged = AppManifest(m.app_id, frozenset({LIVE, "ingest/cits/ezjm/ps-x"}), m.declared_resource_budget, m.signature)
    assert verify_manifest(m, KEY) and not verify_manifest(forged, KEY)
    app = GoodApp()
    with pytest.raises(SignatureInvalid):
        edge.admit_app(app, forged)
    with pytest.raises(SignatureInvalid):
        edge.admit_app(app, AppManifest("app-1", frozenset({LIVE}), 0.5))
    assert app.seen == 0


def test_budget_violation(platform):
    with pytest.raises(BudgetViolation):
        platform.edges["mec-a"].admit_app(HungryApp(), manifest(budget=0.001))
