"""A consumer asks for live C-ITS data around a city and watches it arrive.

Walks through one session by hand: producers register and stay dormant, a
cloud-hosted consumer opens a query, the edge pipeline starts, the bridge to
the cloud comes up and samples flow. A second consumer then asks for the same
data and rides on the pipeline that is already running.

    python demos/first_query.py
"""
import numpy as np

from crowdstream.clients import Consumer
from crowdstream.domain import DataQuery, licences
from crowdstream.edge import EdgeConfig
from crowdstream.harness.scenario import EDGE_ID, SERVING_AREA, ScenarioConfig, _platform_for, spawn_producers

cfg = ScenarioConfig(data_type="cits", workload="low", consumer_host="CLOUD", seed=3)
platform = _platform_for(cfg)
edge = platform.add_edge(EdgeConfig(EDGE_ID, SERVING_AREA))
producers = spawn_producers(platform, cfg)
print(f"{len(producers)} vehicles registered; active: {sum(p.streaming for p in producers)}")


def ask(name):
    c = Consumer(platform, name)
    c.open(DataQuery(name, SERVING_AREA, {cfg.dtype}, licences(cfg.licence)), cfg.sla_contract())
    return c


alice = ask("traffic-lab")
platform.run_for(5)
print(f"after the query: {sum(p.streaming for p in producers)} vehicles streaming, "
      f"{len(edge.pipelines)} pipeline on {EDGE_ID}")
print(f"traffic-lab waited {alice.access_delay_ns / 1e6:.1f} ms for its first sample "
      "(pipeline start-up, bridge set-up, then the next CAM)")

bob = ask("insurer")
platform.run_for(5)
print(f"insurer waited {bob.access_delay_ns / 1e6:.1f} ms; pipelines still {len(edge.pipelines)}")

d = np.asarray(alice.delays_ns) / 1e6
print(f"traffic-lab received {alice.received} samples, delivery delay median {np.median(d):.2f} ms, "
      f"p99 {np.percentile(d, 99):.2f} ms")
bill = platform.cloud.billing_report("traffic-lab")
print(f"billing: {bill.samples_delivered} samples, {bill.bytes_delivered} bytes")
