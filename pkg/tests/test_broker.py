import statistics

import pytest
from hypothesis import given, strategies as st

from crowdstream.broker import (AuthDenied, Broker, Envelope, InvalidTopic, IsolationError, Mode,
                                TokenAuthority, UnknownTopic, bridge, decode_envelope,
                                encode_envelope, frame, split_frames, validate_topic)
from crowdstream.domain import DataType
from crowdstream.netem import NS_PER_MS, NS_PER_S, LinkProfile, Netem, PlatformClock, UnknownProfile, VirtualScheduler

T = "edge/cits/ezjm/p1"
T2 = "edge/cits/ezjm/p2"


class World:
    def __init__(self, seed=0, profiles=None):
        self.sched = VirtualScheduler()
        self.clock = PlatformClock(self.sched)
        self.auth = TokenAuthority(self.clock)
        self.netem = Netem(seed, profiles)
        self.edge = Broker("edge-1", self.sched, self.clock, self.auth, kind="edge")
        self.cloud = Broker("cloud", self.sched, self.clock, self.auth, kind="cloud")

    def pub_token(self, topic=T, ttl=60):
        return self.auth.issue_token([(topic, Mode.PUBLISH)], ttl)

    def sub_token(self, topic=T, ttl=60):
        return self.auth.issue_token([(topic, "subscribe")], ttl)


def env(seq, pseudo="p1", ts=0, payload=b"x"):
    return Envelope(pseudo, seq, ts, 43.3, -1.98, DataType.CITS, True, "open", payload)


def collector():
    got = []
    return got, lambda e, ts: got.append((e, ts))


@pytest.fixture
def w():
    w = World()
    w.edge.create_topic(T)
    return w


# -- tokens -----------------------------------------------------------------

def test_scope_mode_separation(w):
    tok = w.sub_token()
    assert w.auth.is_valid(tok, T, Mode.SUBSCRIBE)
    assert not w.auth.is_valid(tok, T, Mode.PUBLISH)
    with pytest.raises(AuthDenied):
        w.edge.publish(tok, T, env(1))


def test_ttl_zero_is_expired_immediately(w):
    tok = w.auth.issue_token([(T, "publish"), (T, "subscribe")], 0)
    with pytest.raises(AuthDenied):
        w.edge.publish(tok, T, env(1))
    with pytest.raises(AuthDenied):
        w.edge.subscribe(tok, T, lambda e, ts: None)


def test_identical_scope_gives_distinct_ids(w):
    a, b = w.sub_token(), w.sub_token()
    assert a.token_id != b.token_id
    assert len(a.token_id) >= 16


def test_empty_scope_rejected(w):
    with pytest.raises(ValueError):
        w.auth.issue_token([], 60)


def test_expired_token_denied_and_audited(w):
    got, cb = collector()
    w.edge.subscribe(w.sub_token(ttl=3600), T, cb)
    tok = w.pub_token(ttl=1)
    w.edge.publish(tok, T, env(1))
    w.sched.run_for(2 * NS_PER_S)
    with pytest.raises(AuthDenied):
        w.edge.publish(tok, T, env(2))
    w.sched.run()
    assert [e.seq for e, _ in got] == [1]
    last = w.auth.audit[-1]
    assert (last.token_id, last.topic, last.mode, last.reason) == (tok.token_id, T, "publish", "expired token")


def test_revoked_and_forged_tokens(w):
    tok = w.pub_token()
    forged = type(tok)(tok.token_id, frozenset({(T2, Mode.PUBLISH)}), tok.expiry)
    w.edge.create_topic(T2)
    with pytest.raises(AuthDenied, match="forged"):
        w.edge.publish(forged, T2, env(1))
    w.auth.revoke(tok)
    with pytest.raises(AuthDenied, match="revoked"):
        w.edge.publish(tok, T, env(1))
    with pytest.raises(AuthDenied, match="missing"):
        w.edge.publish(None, T, env(1))


def test_subscriber_dropped_when_token_expires_mid_stream(w):
    got, cb = collector()
    sub = w.edge.subscribe(w.sub_token(ttl=1), T, cb)
    pub = w.pub_token(ttl=3600)
    for i in range(1, 4):
        w.sched.call_at(i * 400 * NS_PER_MS, w.edge.publish, pub, T, env(i))
    w.sched.run()
    # published at 0.4 s and 0.8 s only; the 1.2 s one meets an expired token
    assert [e.seq for e, _ in got] == [1, 2]
    assert sub.closed and sub.auth_dropped == 1


@given(st.lists(st.tuples(st.sampled_from([T, T2]), st.sampled_from(["publish", "subscribe"])),
                min_size=1, max_size=4),
       st.sampled_from([T, T2]), st.sampled_from(list(Mode)), st.floats(0, 5), st.floats(0, 10))
def test_token_soundness_property(scope, topic, mode, ttl, wait):
    w = World()
    tok = w.auth.issue_token(scope, ttl)
    w.sched.run_for(int(wait * NS_PER_S))
    expected = (topic, mode) in {(t, Mode(m)) for t, m in scope} and int(wait * NS_PER_S) < int(ttl * NS_PER_S)
    assert w.auth.is_valid(tok, topic, mode) == expected


# -- data plane ---------------------------------------------------------------

def test_fanout_to_three_subscribers(w):
    outs = [collector() for _ in range(3)]
    for _, cb in outs:
        w.edge.subscribe(w.sub_token(), T, cb)
    e = env(1, payload=b"abc")
    ack = w.edge.publish(w.pub_token(), T, e)
    w.sched.run()
    assert ack.seq == 1
    for got, _ in outs:
        assert len(got) == 1 and got[0][0] == e


def test_fifo_order(w):
    got, cb = collector()
    w.edge.subscribe(w.sub_token(), T, cb)
    tok = w.pub_token()
    w.edge.publish(tok, T, env(1))
    w.edge.publish(tok, T, env(2))
    w.sched.run()
    assert [e.seq for e, _ in got] == [1, 2]


def test_fifo_over_jittery_link():
    w = World(seed=3)
    w.edge.create_topic(T)
    got, cb = collector()
    link = w.netem.link("5G-SA", "sub")
    w.edge.subscribe(w.sub_token(), T, cb, link=link)
    tok = w.pub_token(ttl=3600)
    for i in range(1, 2001):
        w.sched.call_at(i * NS_PER_MS, w.edge.publish, tok, T, env(i))
    w.sched.run()
    seqs = [e.seq for e, _ in got]
    assert all(a < b for a, b in zip(seqs, seqs[1:]))
    assert len(seqs) == 2000 - link.dropped


def test_no_persistence(w):
    tok = w.pub_token()
    w.edge.publish(tok, T, env(1))
    got, cb = collector()
    w.edge.subscribe(w.sub_token(), T, cb)
    w.edge.publish(tok, T, env(2))
    w.sched.run()
    assert [e.seq for e, _ in got] == [2]


def test_unknown_topic(w):
    with pytest.raises(UnknownTopic):
        w.edge.publish(w.pub_token(T2), T2, env(1))
    with pytest.raises(UnknownTopic):
        w.edge.subscribe(w.sub_token(T2), T2, lambda e, ts: None)


def test_memory_returns_to_baseline(w):
    base = w.edge.topic_memory_bytes(T)
    subs = [w.edge.subscribe(w.sub_token(), T, lambda e, ts: None,
                             link=w.netem.link("BRIDGE", f"s{i}")) for i in range(5)]
    tok = w.pub_token()
    for i in range(100):
        w.edge.publish(tok, T, env(i + 1, payload=bytes(1000)))
    assert w.edge.topic_memory_bytes(T) == 5 * 100 * 1000
    for s in subs:
        s.close()
    assert w.edge.topic_memory_bytes(T) == base == 0
    assert w.edge.held_bytes() == 0 and w.edge.subscribers(T) == ()
    w.sched.run()


def test_bounded_queue_drops_newest(w):
    got, cb = collector()
    sub = w.edge.subscribe(w.sub_token(), T, cb, limit=10)
    tok = w.pub_token()
    for i in range(1, 16):
        w.edge.publish(tok, T, env(i))
    w.sched.run()
    assert [e.seq for e, _ in got] == list(range(1, 11))
    assert sub.overflow == 5


# -- bridge -----------------------------------------------------------------------

def _bridged(profile, seed=5, n=500):
    w = World(seed=seed)
    w.edge.create_topic(T)
    w.cloud.create_topic("cloud/cits/ezjm/p1")
    br = bridge(w.edge, T, w.cloud, "cloud/cits/ezjm/p1", w.netem, profile)
    at_edge, cb_e = collector()
    at_cloud, cb_c = collector()
    w.edge.subscribe(w.sub_token(), T, cb_e)
    w.cloud.subscribe(w.sub_token("cloud/cits/ezjm/p1"), "cloud/cits/ezjm/p1", cb_c)
    tok = w.pub_token(ttl=3600)
    for i in range(1, n + 1):
        w.sched.call_at(i * 10 * NS_PER_MS, w.edge.publish, tok, T, env(i))
    w.sched.run()
    return br, at_edge, at_cloud


def test_bridge_adds_link_delay():
    br, at_edge, at_cloud = _bridged("BRIDGE")
    edge_ts = {e.seq: ts for e, ts in at_edge}
    deltas = [(ts - edge_ts[e.seq]) / NS_PER_MS for e, ts in at_cloud]
    assert len(deltas) == 500
    assert statistics.median(deltas) == pytest.approx(40.0, abs=0.5)
    assert at_cloud[0][0].path == ("edge-1", "cloud")


def test_zero_delay_bridge():
    _, at_edge, at_cloud = _bridged("LOCAL")
    edge_ts = {e.seq: ts for e, ts in at_edge}
    assert max(abs(ts - edge_ts[e.seq]) for e, ts in at_cloud) < NS_PER_MS


def test_bridge_merge_preserves_per_flow_order():
    w = World(seed=9)
    edge2 = Broker("edge-2", w.sched, w.clock, w.auth, kind="edge")
    ct = "cloud/cits/all/merged"
    w.cloud.create_topic(ct)
    w.edge.create_topic(T)
    edge2.create_topic(T2)
    bridge(w.edge, T, w.cloud, ct, w.netem, "BRIDGE")
    bridge(edge2, T2, w.cloud, ct, w.netem, "5G-SA")
    got, cb = collector()
    w.cloud.subscribe(w.sub_token(ct), ct, cb)
    t1, t2 = w.pub_token(T, 3600), w.pub_token(T2, 3600)
    for i in range(1, 301):
        w.sched.call_at(i * 5 * NS_PER_MS, w.edge.publish, t1, T, env(i, "p1"))
        w.sched.call_at(i * 5 * NS_PER_MS, edge2.publish, t2, T2, env(i, "p2"))
    w.sched.run()
    for pid in ("p1", "p2"):
        seqs = [e.seq for e, _ in got if e.pseudo_id == pid]
        assert seqs and all(a < b for a, b in zip(seqs, seqs[1:]))
    assert {e.pseudo_id for e, _ in got} == {"p1", "p2"}


def test_bridge_errors():
    w = World()
    w.edge.create_topic(T)
    with pytest.raises(UnknownTopic):
        bridge(w.edge, T, w.cloud, "cloud/cits/x/y", w.netem, "BRIDGE")
    w.cloud.create_topic("cloud/cits/x/y")
    with pytest.raises(UnknownProfile):
        bridge(w.edge, T, w.cloud, "cloud/cits/x/y", w.netem, "NOPE")
    other = Broker("edge-2", w.sched, w.clock, w.auth, kind="edge")
    other.create_topic(T2)
    with pytest.raises(IsolationError):
        bridge(w.edge, T, other, T2, w.netem, "BRIDGE")


def test_bridge_setup_delay_skips_early_envelopes():
    w = World()
    w.edge.create_topic(T)
    w.cloud.create_topic("cloud/cits/ezjm/p1")
    bridge(w.edge, T, w.cloud, "cloud/cits/ezjm/p1", w.netem, "LOCAL", setup_ns=150 * NS_PER_MS)
    got, cb = collector()
    w.cloud.subscribe(w.sub_token("cloud/cits/ezjm/p1"), "cloud/cits/ezjm/p1", cb)
    tok = w.pub_token()
    for i in range(1, 5):
        w.sched.call_at(i * 50 * NS_PER_MS, w.edge.publish, tok, T, env(i))
    w.sched.run()
    assert [e.seq for e, _ in got] == [3, 4]


# -- wire format & topics -----------------------------------------------------------

header_floats = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(st.text(min_size=1, max_size=30), st.integers(0, 2**53), st.integers(0, 2**62),
       header_floats, header_floats, st.sampled_from(list(DataType)), st.booleans(),
       st.text(max_size=20), st.binary(max_size=2048))
def test_envelope_round_trip(pid, seq, ts, lat, lon, dt, anon, lic, payload):
    e = Envelope(pid, seq, ts, lat, lon, dt, anon, lic, payload)
    out = decode_envelope(encode_envelope(e))
    assert out == e
    assert out.header() == e.header() and out.payload == payload


def test_envelope_rejects_truncation():
    data = encode_envelope(env(1, payload=b"abc"))
    for cut in (2, 10):
        with pytest.raises(ValueError):
            decode_envelope(data[:cut])


@given(st.lists(st.binary(max_size=300), max_size=20), st.integers(1, 64))
def test_frames_split_across_chunks(bodies, chunk):
    stream = b"".join(frame(b) for b in bodies)
    buf, out = bytearray(), []
    for i in range(0, len(stream), chunk):
        buf.extend(stream[i:i + chunk])
        out.extend(split_frames(buf))
    assert out == bodies and not buf


@pytest.mark.parametrize("topic", ["a/b", "a/b/c/d/e", "a//c", "a/b c/d", "", "a/b/\t"])
def test_invalid_topics(topic):
    with pytest.raises(InvalidTopic):
        validate_topic(topic)


@pytest.mark.parametrize("topic", ["consumer/c1/q1", "edge/cits/ezjm/p1"])
def test_valid_topics(topic):
    assert validate_topic(topic) == topic
