"""Token-protected publish/subscribe engine.

One ``Broker`` runs in the cloud and one per edge node. Topics are flat
strings with a fixed hierarchy; there is no wildcard matching and no
retained history: an envelope published while a topic has no subscribers
is gone.

Every subscriber owns a bounded FIFO queue. ``publish`` only enqueues and
schedules the hand-off, so a slow subscriber never blocks the publisher;
when the queue is full the newest envelope is dropped and counted.
"""
from __future__ import annotations

import asyncio
import json
import logging
import secrets
import struct
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Tuple

from .domain import DataSample, DataType, GeoPoint, Licence
from .netem import Link, NS_PER_S

logger = logging.getLogger(__name__)

DEFAULT_QUEUE_LIMIT = 10_000
HEADER_FIELDS = ("pseudo_id", "seq", "produce_ts_ns", "lat", "lon", "data_type", "anonymised", "licence")
_LEN = struct.Struct(">I")


class BrokerError(Exception):
    pass


class AuthDenied(BrokerError):
    pass


class UnknownTopic(BrokerError):
    pass


class IsolationError(BrokerError):
    """Raised when a path would link two edge domains directly."""


class InvalidTopic(BrokerError, ValueError):
    pass


class Mode(str, Enum):
    PUBLISH = "publish"
    SUBSCRIBE = "subscribe"


def validate_topic(topic: str) -> str:
    if not isinstance(topic, str):
        raise InvalidTopic(f"topic must be a string: {topic!r}")
    if any(c.isspace() for c in topic):
        raise InvalidTopic(f"whitespace in topic {topic!r}")
    parts = topic.split("/")
    if not 3 <= len(parts) <= 4 or not all(parts):
        raise InvalidTopic(f"topic {topic!r} must have 3-4 non-empty segments")
    return topic


def producer_topic(side: str, data_type: DataType, tile: str, pseudo_id: str) -> str:
    return validate_topic(f"{side}/{DataType.parse(data_type).value}/{tile}/{pseudo_id}")


def consumer_topic(consumer_id: str, query_id: str) -> str:
    return validate_topic(f"consumer/{consumer_id}/{query_id}")


@dataclass(frozen=True)
class AccessToken:
    token_id: str
    scope: FrozenSet[Tuple[str, Mode]]
    expiry: int

    def allows(self, topic: str, mode: Mode) -> bool:
        return (topic, mode) in self.scope


@dataclass
class AuditEntry:
    ts: int
    token_id: Optional[str]
    topic: str
    mode: str
    reason: str
    where: str


class TokenAuthority:
    """Issues, validates and revokes access tokens on the shared clock."""

    def __init__(self, clock, audit: Optional[List[AuditEntry]] = None):
        self.clock = clock
        self._live: Dict[str, AccessToken] = {}
        self._revoked = set()
        self.audit: List[AuditEntry] = audit if audit is not None else []

    def issue_token(self, scope: Iterable[Tuple[str, "Mode | str"]], ttl: float) -> AccessToken:
        entries = frozenset((validate_topic(t), Mode(m)) for t, m in scope)
        if not entries:
            raise ValueError("token scope must be non-empty")
        if ttl < 0:
            raise ValueError("ttl must be >= 0")
        token_id = secrets.token_urlsafe(24)
        token = AccessToken(token_id, entries, self.clock.now() + int(ttl * NS_PER_S))
        self._live[token_id] = token
        return token

    def revoke(self, token: "AccessToken | str") -> None:
        token_id = token if isinstance(token, str) else token.token_id
        self._revoked.add(token_id)
        self._live.pop(token_id, None)

    def reason_denied(self, token: Optional[AccessToken], topic: str, mode: Mode) -> Optional[str]:
        if token is None:
            return "missing token"
        registered = self._live.get(token.token_id)
        if registered is None:
            return "revoked token" if token.token_id in self._revoked else "unknown token"
        if registered != token:
            return "forged token"
        if self.clock.now() >= token.expiry:
            return "expired token"
        if not token.allows(topic, mode):
            return "out of scope"
        return None

    def is_valid(self, token: Optional[AccessToken], topic: str, mode: Mode) -> bool:
        return self.reason_denied(token, topic, mode) is None

    def require(self, token: Optional[AccessToken], topic: str, mode: Mode, where: str = "") -> None:
        reason = self.reason_denied(token, topic, mode)
        if reason is not None:
            self.deny(token, topic, mode, reason, where)

    def deny(self, token, topic, mode, reason, where=""):
        token_id = token.token_id if token is not None else None
        self.audit.append(AuditEntry(self.clock.now(), token_id, topic, Mode(mode).value, reason, where))
        logger.warning("auth denied at %s: %s %s on %s (token %s)", where, reason, Mode(mode).value, topic, token_id)
        raise AuthDenied(f"{reason}: {Mode(mode).value} on {topic}")


@dataclass(frozen=True)
class Envelope:
    """A sample on the wire: fixed header plus opaque payload.

    ``epoch`` and ``path`` are in-process metadata (handover epoch and the
    brokers traversed); they are not part of the wire header.
    """

    pseudo_id: str
    seq: int
    produce_ts_ns: int
    lat: float
    lon: float
    data_type: DataType
    anonymised: bool
    licence: str
    payload: bytes = b""
    epoch: int = field(default=0, compare=False)
    path: Tuple[str, ...] = field(default=(), compare=False)

    @classmethod
    def from_sample(cls, sample: DataSample, licence: "Licence | str", epoch: int = 0) -> "Envelope":
        return cls(
            sample.pseudo_id,
            sample.seq,
            sample.produce_ts,
            sample.geotag.lat,
            sample.geotag.lon,
            DataType.parse(sample.data_type),
            bool(sample.anonymised),
            str(licence),
            sample.payload,
            epoch,
        )

    def to_sample(self) -> DataSample:
        return DataSample(
            self.pseudo_id, self.seq, self.produce_ts_ns, GeoPoint(self.lat, self.lon),
            self.data_type, self.payload, self.anonymised,
        )

    @property
    def geotag(self) -> GeoPoint:
        return GeoPoint(self.lat, self.lon)

    def header(self) -> dict:
        return {
            "pseudo_id": self.pseudo_id,
            "seq": self.seq,
            "produce_ts_ns": self.produce_ts_ns,
            "lat": self.lat,
            "lon": self.lon,
            "data_type": self.data_type.value,
            "anonymised": self.anonymised,
            "licence": self.licence,
        }

    def with_hop(self, node: str) -> "Envelope":
        return replace(self, path=self.path + (node,))

    def size(self) -> int:
        return len(self.payload)


def encode_envelope(env: Envelope) -> bytes:
    """4-byte big-endian header length, UTF-8 JSON header, raw payload."""
    header = json.dumps(env.header(), separators=(",", ":")).encode("utf-8")
    return _LEN.pack(len(header)) + header + env.payload


def decode_envelope(data: bytes) -> Envelope:
    if len(data) < 4:
        raise ValueError("truncated envelope")
    (hlen,) = _LEN.unpack_from(data, 0)
    if 4 + hlen > len(data):
        raise ValueError("truncated envelope header")
    header = json.loads(data[4:4 + hlen].decode("utf-8"))
    if set(header) != set(HEADER_FIELDS):
        raise ValueError(f"unexpected header fields {sorted(header)}")
    return Envelope(
        pseudo_id=header["pseudo_id"],
        seq=int(header["seq"]),
        produce_ts_ns=int(header["produce_ts_ns"]),
        lat=header["lat"],
        lon=header["lon"],
        data_type=DataType.parse(header["data_type"]),
        anonymised=bool(header["anonymised"]),
        licence=header["licence"],
        payload=bytes(data[4 + hlen:]),
    )


def frame(data: bytes) -> bytes:
    return _LEN.pack(len(data)) + data


def split_frames(buf: bytearray) -> List[bytes]:
    """Pop every complete frame from the front of ``buf``."""
    out = []
    while len(buf) >= 4:
        (n,) = _LEN.unpack_from(buf, 0)
        if len(buf) < 4 + n:
            break
        out.append(bytes(buf[4:4 + n]))
        del buf[:4 + n]
    return out


async def read_frame(reader: asyncio.StreamReader) -> bytes:
    head = await reader.readexactly(4)
    (n,) = _LEN.unpack(head)
    return await reader.readexactly(n)


def write_frame(writer: asyncio.StreamWriter, data: bytes) -> None:
    writer.write(frame(data))


class Ack(NamedTuple):
    seq: int
    broker_ts: int


class Subscription:
    """Handle for one subscriber: bounded queue, link and counters."""

    def __init__(self, broker: "Broker", topic: str, token: AccessToken, callback: Callable,
                 link: Optional[Link], limit: int, node: Optional[str], name: str = ""):
        self.broker = broker
        self.topic = topic
        self.token = token
        self.callback = callback
        self.link = link
        self.limit = limit
        self.node = node
        self.name = name
        self.queue: deque = deque()
        self.queued_bytes = 0
        self.closed = False
        self.delivered = 0
        self.delivered_bytes = 0
        self.overflow = 0
        self.lost = 0
        self.auth_dropped = 0

    def _offer(self, env: Envelope, now: int) -> None:
        if self.closed:
            return
        if len(self.queue) >= self.limit:
            self.overflow += 1
            return
        if self.link is not None:
            arrival = self.link.transmit(now)
            if arrival is None:
                self.lost += 1
                return
        else:
            arrival = now
        self.queue.append(env)
        self.queued_bytes += len(env.payload)
        self.broker.scheduler.call_at(arrival, self._deliver, node=self.node)

    def _deliver(self) -> None:
        if not self.queue:
            return
        env = self.queue.popleft()
        self.queued_bytes -= len(env.payload)
        if self.closed:
            return
        if not self.broker.authority.is_valid(self.token, self.topic, Mode.SUBSCRIBE):
            self.auth_dropped += 1
            self.broker.authority.audit.append(AuditEntry(
                self.broker.clock.now(), self.token.token_id, self.topic, Mode.SUBSCRIBE.value,
                "token no longer valid at hand-off", self.broker.name))
            self.broker.unsubscribe(self)
            return
        consume_ts = self.broker.clock.now()
        self.delivered += 1
        self.delivered_bytes += len(env.payload)
        hook = self.broker.delivery_hooks.get(self.topic)
        if hook is not None:
            hook(env, consume_ts)
        self.callback(env, consume_ts)

    def close(self) -> None:
        if not self.closed:
            self.broker.unsubscribe(self)


class Broker:
    def __init__(self, name: str, scheduler, clock, authority: TokenAuthority, kind: str = "cloud",
                 queue_limit: int = DEFAULT_QUEUE_LIMIT):
        if kind not in ("cloud", "edge"):
            raise ValueError("broker kind must be 'cloud' or 'edge'")
        self.name = name
        self.kind = kind
        self.scheduler = scheduler
        self.clock = clock
        self.authority = authority
        self.queue_limit = queue_limit
        # topic -> tuple of subscriptions; replaced wholesale on change so
        # publishers iterate a stable snapshot
        self._topics: Dict[str, Tuple[Subscription, ...]] = {}
        self._seq: Dict[str, int] = {}
        # per-topic callbacks run at every hand-off (accounting)
        self.delivery_hooks: Dict[str, Callable] = {}
        self.published = 0
        self.published_bytes = 0

    # -- topics -----------------------------------------------------------
    def create_topic(self, topic: str) -> str:
        validate_topic(topic)
        if topic not in self._topics:
            self._topics[topic] = ()
            self._seq[topic] = 0
        return topic

    def delete_topic(self, topic: str) -> None:
        subs = self._topics.pop(topic, None)
        self._seq.pop(topic, None)
        self.delivery_hooks.pop(topic, None)
        for sub in subs or ():
            self._close(sub)

    def has_topic(self, topic: str) -> bool:
        return topic in self._topics

    def topics(self) -> List[str]:
        return list(self._topics)

    def subscribers(self, topic: str) -> Tuple[Subscription, ...]:
        try:
            return self._topics[topic]
        except KeyError:
            raise UnknownTopic(topic) from None

    # -- data plane -------------------------------------------------------
    def issue_token(self, scope, ttl: float) -> AccessToken:
        return self.authority.issue_token(scope, ttl)

    def publish(self, token: Optional[AccessToken], topic: str, envelope: Envelope) -> Ack:
        self.authority.require(token, topic, Mode.PUBLISH, where=self.name)
        try:
            subs = self._topics[topic]
        except KeyError:
            raise UnknownTopic(topic) from None
        now = self.clock.now()
        seq = self._seq[topic] + 1
        self._seq[topic] = seq
        self.published += 1
        self.published_bytes += len(envelope.payload)
        if subs:
            env = envelope.with_hop(self.name)
            for sub in subs:
                sub._offer(env, now)
        return Ack(seq, now)

    def subscribe(self, token: Optional[AccessToken], topic: str, callback: Callable,
                  link: Optional[Link] = None, node: Optional[str] = None, name: str = "",
                  limit: Optional[int] = None) -> Subscription:
        self.authority.require(token, topic, Mode.SUBSCRIBE, where=self.name)
        if topic not in self._topics:
            raise UnknownTopic(topic)
        sub = Subscription(self, topic, token, callback, link,
                           self.queue_limit if limit is None else limit,
                           self.name if node is None else node, name)
        self._topics[topic] = self._topics[topic] + (sub,)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        subs = self._topics.get(sub.topic)
        if subs is not None and sub in subs:
            self._topics[sub.topic] = tuple(s for s in subs if s is not sub)
        self._close(sub)

    @staticmethod
    def _close(sub: Subscription) -> None:
        sub.closed = True
        sub.queue.clear()
        sub.queued_bytes = 0

    # -- introspection ----------------------------------------------------
    def topic_memory_bytes(self, topic: str) -> int:
        return sum(s.queued_bytes for s in self._topics.get(topic, ()))

    def held_bytes(self) -> int:
        return sum(s.queued_bytes for subs in self._topics.values() for s in subs)

    def queued_envelopes(self) -> int:
        return sum(len(s.queue) for subs in self._topics.values() for s in subs)


class Bridge:
    """Re-publishes every envelope of a topic on another broker after a link delay.

    The bridge needs ``setup_ns`` before it starts forwarding; envelopes
    published on the source topic earlier are not carried. Per-flow order is
    preserved because the underlying link is FIFO.
    """

    def __init__(self, src: Broker, src_topic: str, dst: Broker, dst_topic: str, link: Link,
                 token: AccessToken, setup_ns: int = 0, on_ready: Optional[Callable] = None,
                 node: Optional[str] = None):
        if src.kind == "edge" and dst.kind == "edge":
            raise IsolationError(f"edge-to-edge bridge {src.name} -> {dst.name} is not allowed")
        if not src.has_topic(src_topic):
            raise UnknownTopic(src_topic)
        if not dst.has_topic(dst_topic):
            raise UnknownTopic(dst_topic)
        self.src, self.src_topic = src, src_topic
        self.dst, self.dst_topic = dst, dst_topic
        self.link = link
        self.token = token
        self.node = node or dst.name
        self.sub: Optional[Subscription] = None
        self.ready = False
        self.closed = False
        self.forwarded = 0
        self._on_ready = on_ready
        src.scheduler.call_later(setup_ns, self._activate, node=self.node)

    def _activate(self) -> None:
        if self.closed:
            return
        self.sub = self.src.subscribe(self.token, self.src_topic, self._forward, link=self.link,
                                      node=self.node, name=f"bridge:{self.dst.name}")
        self.ready = True
        if self._on_ready is not None:
            self._on_ready(self)

    def _forward(self, env: Envelope, ts: int) -> None:
        if self.closed or not self.dst.has_topic(self.dst_topic):
            return
        self.forwarded += 1
        self.dst.publish(self.token, self.dst_topic, env)

    def close(self) -> None:
        self.closed = True
        if self.sub is not None:
            self.sub.close()

    @property
    def lost(self) -> int:
        return self.sub.lost if self.sub else 0

    @property
    def overflow(self) -> int:
        return self.sub.overflow if self.sub else 0


def bridge(src: Broker, src_topic: str, dst: Broker, dst_topic: str, netem, profile_name: str,
           setup_ns: int = 0, ttl: float = 365 * 86400, on_ready=None) -> Bridge:
    """Bridge ``src_topic`` on ``src`` to ``dst_topic`` on ``dst`` over a named link profile."""
    link = netem.link(profile_name, f"bridge:{src.name}:{src_topic}->{dst.name}:{dst_topic}")
    token = src.authority.issue_token([(src_topic, Mode.SUBSCRIBE), (dst_topic, Mode.PUBLISH)], ttl)
    return Bridge(src, src_topic, dst, dst_topic, link, token, setup_ns, on_ready)
