"""Device sessions, UE-initiated handover and region-of-interest casting.

There is no network-side continuity: a device polls discovery whenever it
moves, and if the serving infrastructure changed it tears down its local
attachments and starts over at the new host. The cloud keeps the flow's
pseudo id, so consumers see one continuous flow whose samples carry a
bumped epoch.

Casting looks up the last known position of every device (from uplink
geotags, or from periodic beacons while the device is dormant) and sends
the event down each matching device's downlink topic on its serving host.
"""
from __future__ import annotations

import itertools
import logging
import secrets
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .broker import AccessToken, Envelope, Mode
from .clients import Vehicle
from .domain import DataType, GeoPoint, GeoRegion
from .edge import PLATFORM_TOKEN_TTL_S
from .netem import NS_PER_MS, NS_PER_S

logger = logging.getLogger(__name__)

CAST_TOPIC = "downlink/all/events"
DEFAULT_BEACON_INTERVAL_S = 10.0


class MobilityError(Exception):
    pass


class SessionExists(MobilityError):
    pass


@dataclass
class UeSession:
    device_id: str
    current_edge: str
    flows: List[str]
    epoch: int = 0
    live: bool = True


@dataclass(frozen=True)
class RoiEvent:
    event_id: str
    region: GeoRegion
    payload: bytes
    issued_ts: int


@dataclass(frozen=True)
class HandoverReport:
    device_id: str
    old_host: str
    new_host: str
    epoch: int
    ts: int
    changed: bool
    cloud_fallback: bool = False


@dataclass
class _Downlink:
    host_id: str
    topic: str
    publish_token: AccessToken
    sub: object


class MobilityManager:
    def __init__(self, platform, beacon_interval_s: float = DEFAULT_BEACON_INTERVAL_S):
        self.platform = platform
        self.cloud = platform.cloud
        self.beacon_interval_ns = int(beacon_interval_s * NS_PER_S)
        self.sessions: Dict[str, UeSession] = {}
        self.vehicles: Dict[str, Vehicle] = {}
        self.positions: Dict[str, GeoPoint] = {}
        self._device_of: Dict[str, str] = {}
        self._downlinks: Dict[str, _Downlink] = {}
        self._events = itertools.count(1)
        self.handovers: List[HandoverReport] = []
        self.cloud.broker.create_topic(CAST_TOPIC)

    def issue_cast_token(self, ttl: float = 3600.0) -> AccessToken:
        return self.platform.authority.issue_token([(CAST_TOPIC, Mode.PUBLISH)], ttl)

    # -- sessions ---------------------------------------------------------
    def attach(self, vehicle: Vehicle) -> UeSession:
        """Start the device's session at its serving host (producers already registered)."""
        old = self.sessions.get(vehicle.device_id)
        if old is not None and old.live:
            raise SessionExists(vehicle.device_id)
        host_id = self.cloud.discover(vehicle.position).host_id
        pseudo = [p.pseudo_id for p in vehicle.producers if p.flow is not None]
        session = UeSession(vehicle.device_id, host_id, pseudo)
        self.sessions[vehicle.device_id] = session
        self.vehicles[vehicle.device_id] = vehicle
        for pid in pseudo:
            self._device_of[pid] = vehicle.device_id
        self.positions[vehicle.device_id] = vehicle.position
        self._open_downlink(vehicle, host_id)
        if self.beacon_interval_ns > 0:
            self.platform.scheduler.call_later(self.beacon_interval_ns, self._beacon, vehicle.device_id,
                                               node="producer")
        return session

    def detach(self, device_id: str) -> None:
        session = self.sessions.get(device_id)
        if session is None:
            return
        session.live = False
        self._close_downlink(device_id)

    def note_position(self, pseudo_id: str, lat: float, lon: float) -> None:
        dev = self._device_of.get(pseudo_id)
        if dev is not None:
            self.positions[dev] = GeoPoint(lat, lon)

    def _beacon(self, device_id: str) -> None:
        session = self.sessions.get(device_id)
        if session is None or not session.live:
            return
        vehicle = self.vehicles[device_id]
        if not any(p.streaming for p in vehicle.producers):
            link_name = vehicle.producers[0].producer_link if vehicle.producers else "ETH"
            now = self.platform.clock.now()
            arrival = self.platform.netem.link(link_name, f"beacon:{device_id}").transmit(now)
            if arrival is not None:
                where = vehicle.position
                self.platform.scheduler.call_at(
                    arrival, lambda: self.positions.__setitem__(device_id, where), node="cloud")
        self.platform.scheduler.call_later(self.beacon_interval_ns, self._beacon, device_id, node="producer")

    # -- handover ---------------------------------------------------------
    def move(self, session: UeSession, new_position: GeoPoint) -> HandoverReport:
        if not session.live:
            raise MobilityError(f"session of {session.device_id} is closed")
        vehicle = self.vehicles[session.device_id]
        vehicle.position = new_position
        now = self.platform.clock.now()
        target = self.cloud.discover(new_position).host_id
        old = session.current_edge
        if target == old:
            return HandoverReport(session.device_id, old, old, session.epoch, now, False)
        session.epoch += 1
        if target == "cloud":
            logger.warning("device %s left every serving area; ingest falls back to the cloud", session.device_id)
        for p in vehicle.producers:
            if p.flow is None:
                continue
            p.epoch = session.epoch
            last = p._uplink._last_arrival if p._uplink is not None else now
            drain = max(0, last - now) + NS_PER_MS
            topic, token = self.cloud.relocate_flow(p.pseudo_id, target, drain)
            p.connect(self.cloud.host(target), topic, token)
        self._close_downlink(session.device_id)
        self._open_downlink(vehicle, target)
        session.current_edge = target
        report = HandoverReport(session.device_id, old, target, session.epoch, now, True, target == "cloud")
        self.handovers.append(report)
        return report

    # -- downlink / casting -----------------------------------------------
    def _open_downlink(self, vehicle: Vehicle, host_id: str) -> None:
        host = self.cloud.host(host_id)
        topic = host.broker.create_topic(f"downlink/{host_id}/{secrets.token_hex(8)}")
        auth = self.platform.authority
        device_token = auth.issue_token([(topic, Mode.SUBSCRIBE)], PLATFORM_TOKEN_TTL_S)
        publish_token = auth.issue_token([(topic, Mode.PUBLISH)], PLATFORM_TOKEN_TTL_S)
        link_name = vehicle.producers[0].producer_link if vehicle.producers else "ETH"
        link = self.platform.netem.link(link_name, f"downlink:{vehicle.device_id}:{host_id}")
        sub = host.broker.subscribe(device_token, topic, vehicle.receive_event, link=link, node="producer",
                                    name="device")
        self._downlinks[vehicle.device_id] = _Downlink(host_id, topic, publish_token, sub)

    def _close_downlink(self, device_id: str) -> None:
        dl = self._downlinks.pop(device_id, None)
        if dl is None:
            return
        broker = self.cloud.broker_of(dl.host_id)
        self.platform.authority.revoke(dl.publish_token)
        self.platform.authority.revoke(dl.sub.token)
        if broker.has_topic(dl.topic):
            broker.delete_topic(dl.topic)

    def make_event(self, region: GeoRegion, payload: bytes) -> RoiEvent:
        return RoiEvent(f"ev{next(self._events)}", region, payload, self.platform.clock.now())

    def cast_event(self, token: AccessToken, event: RoiEvent) -> int:
        """Deliver ``event`` to every device last seen inside its region; returns the count."""
        self.platform.authority.require(token, CAST_TOPIC, Mode.PUBLISH, where="cloud")
        positions = dict(self.positions)
        targets = sorted(d for d, p in positions.items()
                         if d in self._downlinks and event.region.contains(p))
        now = self.platform.clock.now()
        centre = event.region.centre
        for n, device_id in enumerate(targets, 1):
            dl = self._downlinks[device_id]
            env = Envelope(event.event_id, n, event.issued_ts, centre.lat, centre.lon, DataType.CITS, True,
                           "platform", event.payload)
            arrival = now
            if dl.host_id != "cloud":
                link = self.platform.netem.link("BRIDGE", f"control:cloud->{dl.host_id}")
                arrival = link.transmit(now)
                if arrival is None:
                    arrival = now + int(link.profile.one_way_delay_ms * NS_PER_MS)
            broker = self.cloud.broker_of(dl.host_id)
            self.platform.scheduler.call_at(arrival, self._publish_down, broker, dl, env, node=dl.host_id)
        self._last_cast = targets
        return len(targets)

    @staticmethod
    def _publish_down(broker, dl: _Downlink, env: Envelope) -> None:
        if broker.has_topic(dl.topic):
            broker.publish(dl.publish_token, dl.topic, env)
