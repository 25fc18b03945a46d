"""How delivery delay spreads as more vehicles join.

Runs the three workload levels for one data type over Ethernet with an edge
consumer and prints the median, p99 and their ratio, then writes the usual
CSV and markdown summary to ``demo-out/``.

    python demos/workload_sweep.py [cits|image|video]
"""
import sys

from crowdstream.harness.report import emit_report
from crowdstream.harness.scenario import ScenarioConfig, run_scenario

data_type = sys.argv[1] if len(sys.argv) > 1 else "video"
records = []
for workload in ("low", "medium", "high"):
    rec = run_scenario(ScenarioConfig(data_type=data_type, workload=workload, duration_s=30, seed=1))
    records.append(rec)
    n = ScenarioConfig.from_dict(rec.config).n_producers
    print(f"{data_type:5s} {workload:6s} {n:3d} producers  "
          f"median {rec.median_ms():7.3f} ms  p99 {rec.percentile_ms(99):7.3f} ms  "
          f"p99/median {rec.tail_ratio():.3f}")
paths = emit_report(records, "demo-out", plots=True)
print("wrote " + ", ".join(paths))
