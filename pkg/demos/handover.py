"""One vehicle drives from one operator's edge into another's.

The vehicle re-discovers its serving edge, reconnects under the same pseudonym
and the consumer sees a short gap in the stream with a bumped epoch.

    python demos/handover.py
"""
import random

from crowdstream.clients import Consumer, Producer, Vehicle
from crowdstream.domain import DataQuery, GeoPoint, GeoRegion, SlaContract, licences
from crowdstream.edge import EdgeConfig
from crowdstream.runtime import Platform

west = GeoRegion(43.28, 43.34, -2.02, -1.94)
east = GeoRegion(43.28, 43.34, -1.90, -1.82)
platform = Platform(seed=4)
platform.add_edge(EdgeConfig("mec-west", west))
platform.add_edge(EdgeConfig("mec-east", east))

car = Vehicle("car-7", GeoPoint(43.31, -1.98), station_id=7)
producer = Producer(platform, car, "cits", "open", rng=random.Random(7))
producer.register()
session = platform.mobility.attach(car)

watcher = Consumer(platform, "fleet-desk", keep_envelopes=True)
watcher.open(DataQuery("fleet-desk", GeoRegion(43.2, 43.4, -2.1, -1.8), {"cits"}, licences("open")),
             SlaContract(4.0))
platform.run_for(10)
print(f"before: served by {session.current_edge}, {watcher.received} samples seen")

report = platform.mobility.move(session, GeoPoint(43.31, -1.86))
platform.run_for(10)
print(f"moved {report.old_host} -> {report.new_host}, epoch {report.epoch}")

stamps = [(e.epoch, ts) for e, ts in zip(watcher.envelopes, watcher.consume_ts)]
gap = min(ts for ep, ts in stamps if ep == 1) - max(ts for ep, ts in stamps if ep == 0)
print(f"stream gap across the move: {gap / 1e6:.0f} ms (a fresh pipeline had to start on the new edge)")
print(f"pseudonyms seen by the consumer: {sorted({e.pseudo_id for e in watcher.envelopes})}")
print(f"order violations: {watcher.order_violations}, epoch violations: {watcher.epoch_violations}")
