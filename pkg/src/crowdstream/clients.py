"""Producer and consumer endpoints.

A ``Vehicle`` carries one or more ``Producer`` objects (one per data flow).
Producers are dormant after registration; the serving host wakes them when
a consumer path for their flow is ready. While active they emit on a
periodic grid with a random phase, so a producer re-activated later keeps
its cadence.

A ``Consumer`` opens query sessions and records delivery delays, its
access delay and a few audit facts (per-flow order, licences, hops).
"""
from __future__ import annotations

import logging
import random
from array import array
from typing import Dict, List, Optional

from .broker import Envelope
from .cam import CITS_PAYLOAD_BYTES, encode_cam, make_cam
from .domain import DataQuery, DataSample, DataType, GeoPoint, Licence, ProducerDescriptor, SlaContract
from .netem import NS_PER_S

logger = logging.getLogger(__name__)

IMAGE_PAYLOAD_BYTES = 428_571
VIDEO_PAYLOAD_BYTES = 25_000
NOMINAL_RATE = {DataType.CITS: 4.0, DataType.IMAGE: 2.0, DataType.VIDEO: 10.0}


def payload_size(data_type: DataType, payload_scale: float = 0.1) -> int:
    """Bytes per sample; only image payloads are scaled down."""
    data_type = DataType.parse(data_type)
    if data_type is DataType.CITS:
        return CITS_PAYLOAD_BYTES
    if data_type is DataType.IMAGE:
        return int(round(IMAGE_PAYLOAD_BYTES * payload_scale))
    return VIDEO_PAYLOAD_BYTES


_BLOBS: Dict[int, bytes] = {}


def _blob(n: int) -> bytes:
    b = _BLOBS.get(n)
    if b is None:
        b = _BLOBS[n] = bytes(n)
    return b


class Vehicle:
    """A device: position, raw identity and the producers it carries."""

    def __init__(self, device_id: str, position: GeoPoint, station_id: int, vin: str = ""):
        self.device_id = device_id
        self.position = position
        self.station_id = station_id
        self.vin = vin or f"VIN{station_id:014d}"
        self.producers: List["Producer"] = []
        self.events: List[tuple] = []

    def receive_event(self, env: Envelope, ts: int) -> None:
        self.events.append((ts, env.payload))


class Producer:
    def __init__(self, platform, vehicle: Vehicle, data_type: DataType, licence: str,
                 nominal_rate: Optional[float] = None, producer_link: str = "ETH",
                 payload_scale: float = 0.1, rng: Optional[random.Random] = None,
                 emission_jitter: float = 0.0, clock_skew: float = 1e-3):
        self.platform = platform
        self.vehicle = vehicle
        self.data_type = DataType.parse(data_type)
        self.licence = Licence(licence)
        self.nominal_rate = nominal_rate or NOMINAL_RATE[self.data_type]
        self.producer_link = producer_link
        rng = rng or random.Random()
        nominal_period = NS_PER_S / self.nominal_rate
        self.phase_ns = rng.randrange(int(round(nominal_period)))
        # device oscillators run a little slow (never above the nominal rate),
        # so producers drift against each other instead of colliding forever
        if not 0.0 <= clock_skew < 0.1:
            raise ValueError("clock_skew must be within [0, 0.1)")
        self.period_ns = int(round(nominal_period * (1.0 + rng.uniform(0.0, clock_skew))))
        # each sample leaves up to this share of a period after its grid slot
        if not 0.0 <= emission_jitter < 1.0:
            raise ValueError("emission_jitter must be within [0, 1)")
        self.jitter_ns = int(emission_jitter * self.period_ns)
        self._rng = random.Random(rng.getrandbits(64))
        self.size = payload_size(self.data_type, payload_scale)
        self.flow = None
        self.host = None
        self.topic = None
        self.token = None
        self.epoch = 0
        self.seq = 0
        self.produced = 0
        self.lost = 0
        self.rejected = 0
        self.streaming = False
        self.stopped = False
        self.activations = 0
        self._gen = 0
        self._uplink = None
        vehicle.producers.append(self)

    # -- registration -----------------------------------------------------
    def descriptor(self) -> ProducerDescriptor:
        return ProducerDescriptor(self.data_type, self.licence, self.vehicle.position,
                                  self.nominal_rate, self.producer_link)

    def register(self):
        self.flow = self.platform.cloud.register_flow(self.descriptor(), device=self)
        self.connect(*self.platform.cloud.attachment(self.flow.pseudo_id))
        return self.flow

    @property
    def pseudo_id(self) -> Optional[str]:
        return self.flow.pseudo_id if self.flow else None

    def connect(self, host, topic, token) -> None:
        """Point the uplink at a (new) serving host; stays silent until activated there."""
        self.host, self.topic, self.token = host, topic, token
        self._uplink = self.platform.netem.link(self.producer_link, f"uplink:{self.flow.pseudo_id}:{host.name}")
        self._halt()

    # -- activation -------------------------------------------------------
    def activate(self, host_name: str) -> None:
        if self.stopped or self.host is None or host_name != self.host.name or self.streaming:
            return
        self.streaming = True
        self.activations += 1
        self._gen += 1
        now = self.platform.scheduler.now()
        k = -(-(now - self.phase_ns) // self.period_ns)
        self._schedule(self.phase_ns + max(0, k) * self.period_ns)

    def deactivate(self, host_name: str) -> None:
        if self.host is not None and host_name == self.host.name:
            self._halt()

    def _halt(self) -> None:
        self.streaming = False
        self._gen += 1

    def stop(self) -> None:
        self.stopped = True
        self._halt()

    def _schedule(self, slot: int) -> None:
        offset = self._rng.randrange(self.jitter_ns) if self.jitter_ns else 0
        self.platform.scheduler.call_at(slot + offset, self._tick, self._gen, slot, node="producer")

    def _tick(self, gen: int, slot: int) -> None:
        if gen != self._gen or not self.streaming:
            return
        self.emit()
        self._schedule(slot + self.period_ns)

    # -- data -------------------------------------------------------------
    def _payload(self, now: int) -> bytes:
        if self.data_type is DataType.CITS:
            v = self.vehicle
            cam = make_cam(v.station_id, v.position.lat, v.position.lon, gen_delta_ms=now // 1_000_000,
                           vin=v.vin)
            return encode_cam(cam, self.size)
        return _blob(self.size)

    def emit(self) -> Envelope:
        now = self.platform.clock.now()
        self.seq += 1
        self.produced += 1
        sample = DataSample(self.flow.pseudo_id, self.seq, now, self.vehicle.position, self.data_type,
                            self._payload(now))
        env = Envelope.from_sample(sample, self.licence, self.epoch)
        arrival = self._uplink.transmit(now)
        if arrival is None:
            self.lost += 1
            return env
        self.platform.scheduler.call_at(arrival, self._land, self.host, self.token, self.topic, env,
                                        node=self.host.name)
        return env

    def _land(self, host, token, topic, env) -> None:
        try:
            host.receive(token, topic, env)
        except Exception as exc:  # ingest topic torn down while in flight
            self.rejected += 1
            logger.debug("sample %s/%d rejected: %s", env.pseudo_id, env.seq, exc)


class Consumer:
    """Query client; records what it receives."""

    def __init__(self, platform, consumer_id: str, host: Optional[str] = None, keep_envelopes: bool = False):
        self.platform = platform
        self.consumer_id = consumer_id
        self.host = host
        self.keep_envelopes = keep_envelopes
        self.session = None
        self.sub = None
        self.delays_ns = array("q")
        self.consume_ts = array("q")
        self.first_delivery_ts: Optional[int] = None
        self.received = 0
        self.received_bytes = 0
        self.last_seq: Dict[str, int] = {}
        self.last_epoch: Dict[str, int] = {}
        self.order_violations = 0
        self.epoch_violations = 0
        self.licences_seen = set()
        self.paths = set()
        self.envelopes: List[Envelope] = []

    def open(self, query: DataQuery, sla: SlaContract):
        cloud = self.platform.cloud
        self.session = cloud.open_session(query, sla, consumer_host=self.host)
        broker = cloud.broker_of(self.session.consumer_host)
        self.sub = broker.subscribe(self.session.token, self.session.consumer_topic, self._on_envelope,
                                    node="consumer", name=f"consumer:{self.consumer_id}")
        return self.session

    def close(self):
        record = self.platform.cloud.close_session(self.session.session_id)
        return record

    @property
    def access_delay_ns(self) -> Optional[int]:
        if self.first_delivery_ts is None or self.session is None:
            return None
        return self.first_delivery_ts - self.session.created_ts

    def _on_envelope(self, env: Envelope, ts: int) -> None:
        if self.first_delivery_ts is None:
            self.first_delivery_ts = ts
        self.received += 1
        self.received_bytes += len(env.payload)
        self.delays_ns.append(ts - env.produce_ts_ns)
        self.consume_ts.append(ts)
        last = self.last_seq.get(env.pseudo_id)
        if last is not None and env.seq <= last:
            self.order_violations += 1
        self.last_seq[env.pseudo_id] = env.seq
        prev_epoch = self.last_epoch.get(env.pseudo_id)
        if prev_epoch is not None and env.epoch < prev_epoch:
            self.epoch_violations += 1
        self.last_epoch[env.pseudo_id] = env.epoch
        self.licences_seen.add(env.licence)
        self.paths.add(env.path)
        if self.keep_envelopes:
            self.envelopes.append(env)
