"""Command-line front end: ``run``, ``report`` and ``sweep``.

Exit status is 0 only when every run invariant held, 1 when a run finished
with a breached invariant and 2 on unusable input.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from typing import List, Optional

from .metrics import MetricsRecord
from .report import emit_report, load_record, save_record, summarise
from .scenario import ScenarioConfig, run_scenario

logger = logging.getLogger("crowdstream")

GRID_AXES = ("data_type", "workload", "producer_link", "consumer_host")
FULL_GRID = {
    "data_type": ["cits", "image", "video"],
    "workload": ["low", "medium", "high"],
    "producer_link": ["ETH", "5G-SA"],
    "consumer_host": ["MEC", "CLOUD"],
}


def _execute(config: ScenarioConfig, mode: str) -> MetricsRecord:
    progress = logger.info
    if mode == "multiproc":
        from .multiproc import run_multiproc
        return run_multiproc(config, progress=progress)
    return run_scenario(config, progress=progress)


def _describe(rec: MetricsRecord) -> str:
    t = rec.totals()
    state = "ok" if rec.ok else "INVARIANT BREACH"
    return (f"{rec.config.get('name') or ScenarioConfig.from_dict(_scenario_fields(rec.config)).label()}: "
            f"delivered {t['delivered']}/{t['produced']}, median {rec.median_ms():.3f} ms, "
            f"p99 {rec.percentile_ms(99):.3f} ms, wall {rec.wall_time_s:.1f} s [{state}]")


def _scenario_fields(d: dict) -> dict:
    names = ScenarioConfig.__dataclass_fields__
    return {k: v for k, v in d.items() if k in names}


def expand_matrix(matrix: dict) -> List[ScenarioConfig]:
    """Cartesian product of the grid axes on top of ``matrix['base']``.

    Axes left out of the file take the full grid.
    """
    base = dict(matrix.get("base", {}))
    unknown = set(matrix) - set(GRID_AXES) - {"base"}
    if unknown:
        raise ValueError(f"unknown matrix keys: {sorted(unknown)}")
    axes = [matrix.get(a, FULL_GRID[a]) for a in GRID_AXES]
    return [ScenarioConfig.from_dict({**base, **dict(zip(GRID_AXES, combo))})
            for combo in itertools.product(*axes)]


def cmd_run(args) -> int:
    config = ScenarioConfig.from_file(args.scenario)
    if args.seed is not None:
        config.seed = args.seed
    rec = _execute(config, args.mode)
    save_record(rec, args.out)
    emit_report(rec, args.out, plots=not args.no_plots)
    print(_describe(rec))
    for line in rec.diagnostics:
        print(f"  {line}")
    return 0 if rec.ok else 1


def cmd_report(args) -> int:
    rec = load_record(args.in_dir)
    out = args.out or args.in_dir
    paths = emit_report(rec, out, plots=not args.no_plots)
    print(_describe(rec))
    for p in paths:
        print(f"  wrote {p}")
    return 0 if rec.ok else 1


def cmd_sweep(args) -> int:
    with open(args.matrix, encoding="utf-8") as fh:
        matrix = json.load(fh)
    configs = expand_matrix(matrix)
    records = []
    for config in configs:
        if args.seed is not None:
            config.seed = args.seed
        rec = _execute(config, args.mode)
        save_record(rec, os.path.join(args.out, config.label()))
        print(_describe(rec), flush=True)
        records.append(rec)
    emit_report(records, args.out, plots=not args.no_plots)
    rows = summarise(records)
    print(f"{len(rows)} scenario(s); summary in {os.path.join(args.out, 'summary.md')}")
    return 0 if all(r.ok for r in records) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowdstream", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario file")
    run.add_argument("--scenario", required=True, help="scenario JSON file")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--mode", choices=("inproc", "multiproc"), default="inproc")
    run.add_argument("--no-plots", action="store_true")
    run.set_defaults(fn=cmd_run)

    rep = sub.add_parser("report", help="re-emit CSV/tables/plots from a run directory")
    rep.add_argument("--in", dest="in_dir", required=True)
    rep.add_argument("--out", default=None, help="defaults to the input directory")
    rep.add_argument("--no-plots", action="store_true")
    rep.set_defaults(fn=cmd_report)

    sw = sub.add_parser("sweep", help="run a grid of scenarios")
    sw.add_argument("--matrix", required=True, help="matrix JSON file (axes + base config)")
    sw.add_argument("--out", default="sweep-out")
    sw.add_argument("--seed", type=int, default=None)
    sw.add_argument("--mode", choices=("inproc", "multiproc"), default="inproc")
    sw.add_argument("--no-plots", action="store_true")
    sw.set_defaults(fn=cmd_sweep)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
