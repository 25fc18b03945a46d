"""CSV, summary tables and box plots from metrics records.

Summary cells are written as "mean (variance)" with the sample variance
(n - 1 denominator), in ms and ms^2.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from typing import Dict, Iterable, List, Sequence

import numpy as np

from .metrics import MetricsRecord

logger = logging.getLogger(__name__)

DELAY_HEADER = ["consumer", "index", "delay_ms"]
SUMMARY_HEADER = [
    "scenario", "data_type", "workload", "producer_link", "consumer_host", "n_samples",
    "access_mean_ms", "access_var_ms2", "delivery_mean_ms", "delivery_var_ms2",
    "delivery_median_ms", "delivery_p99_ms",
]


def mean_var(values) -> tuple:
    """Mean and sample variance; variance is nan below two values."""
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        return float("nan"), float("nan")
    var = float(np.var(a, ddof=1)) if a.size > 1 else float("nan")
    return float(np.mean(a)), var


def _label(rec: MetricsRecord) -> str:
    c = rec.config
    return c.get("name") or f"{c['data_type']}-{c['workload']}-{c['producer_link']}-{c['consumer_host']}"


def summarise(records: Iterable[MetricsRecord]) -> List[dict]:
    rows = []
    for rec in records:
        c = rec.config
        d = rec.all_delays_ms()
        access = [v for v in rec.access_delays_ms.values() if v is not None]
        am, av = mean_var(access)
        dm, dv = mean_var(d)
        rows.append({
            "scenario": _label(rec),
            "data_type": c["data_type"],
            "workload": c["workload"],
            "producer_link": c["producer_link"],
            "consumer_host": c["consumer_host"],
            "n_samples": int(d.size),
            "access_mean_ms": am,
            "access_var_ms2": av,
            "delivery_mean_ms": dm,
            "delivery_var_ms2": dv,
            "delivery_median_ms": float(np.median(d)) if d.size else float("nan"),
            "delivery_p99_ms": float(np.percentile(d, 99)) if d.size else float("nan"),
        })
    return rows


def write_delays_csv(rec: MetricsRecord, path: str) -> str:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DELAY_HEADER)
        for consumer in sorted(rec.delays_ms):
            for i, v in enumerate(rec.delays_ms[consumer]):
                w.writerow([consumer, i, repr(float(v))])
    return path


def read_delays_csv(path: str) -> Dict[str, np.ndarray]:
    out: Dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != DELAY_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for consumer, _, value in r:
            out.setdefault(consumer, []).append(float(value))
    return {k: np.asarray(v, dtype=float) for k, v in out.items()}


def write_summary_csv(rows: Sequence[dict], path: str) -> str:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for row in rows:
            w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in SUMMARY_HEADER])
    return path


def _cell(mean: float, var: float) -> str:
    if math.isnan(mean):
        return "-"
    return f"{mean:.2f} ({var:.2f})" if not math.isnan(var) else f"{mean:.2f}"


def write_summary_table(rows: Sequence[dict], path: str) -> str:
    """Markdown tables laid out by data type/workload (rows) and link/host (columns)."""
    cols = sorted({(r["producer_link"], r["consumer_host"]) for r in rows})
    order = {"low": 0, "medium": 1, "high": 2}
    keys = sorted({(r["data_type"], r["workload"]) for r in rows}, key=lambda k: (k[0], order.get(k[1], 9)))
    index = {(r["data_type"], r["workload"], r["producer_link"], r["consumer_host"]): r for r in rows}
    lines = ["Cells are mean (sample variance); delays in ms, variances in ms^2.", ""]
    for title, m, v in (("Data Access Delay", "access_mean_ms", "access_var_ms2"),
                        ("Data Delivery Delay", "delivery_mean_ms", "delivery_var_ms2")):
        lines.append(f"## {title}")
        lines.append("")
        lines.append("| data type | workload | " + " | ".join(f"{l} / {h}" for l, h in cols) + " |")
        lines.append("|---|---|" + "---|" * len(cols))
        for dt, wl in keys:
            cells = []
            for l, h in cols:
                r = index.get((dt, wl, l, h))
                cells.append(_cell(r[m], r[v]) if r else "-")
            lines.append(f"| {dt} | {wl} | " + " | ".join(cells) + " |")
        lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
    return path


def write_boxplots(records: Sequence[MetricsRecord], out_dir: str) -> List[str]:
    """One box-plot image per data type, one box per scenario."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    by_type: Dict[str, List[MetricsRecord]] = {}
    for rec in records:
        by_type.setdefault(rec.config["data_type"], []).append(rec)
    for dt, recs in sorted(by_type.items()):
        recs = [r for r in recs if r.all_delays_ms().size]
        if not recs:
            continue
        fig, ax = plt.subplots(figsize=(max(4, 1.6 * len(recs)), 4))
        ax.boxplot([r.all_delays_ms() for r in recs], showfliers=True, flierprops={"markersize": 2})
        ax.set_xticks(range(1, len(recs) + 1))
        ax.set_xticklabels([_label(r).replace(f"{dt}-", "") for r in recs], rotation=30, ha="right", fontsize=8)
        ax.set_ylabel("delivery delay (ms)")
        ax.set_title(f"{dt} data delivery delay")
        fig.tight_layout()
        path = os.path.join(out_dir, f"boxplot_{dt}.png")
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written


def emit_report(records, out_dir: str, plots: bool = True) -> List[str]:
    """Write delays CSV(s), summary CSV/markdown and box plots; returns the paths."""
    if isinstance(records, MetricsRecord):
        records = [records]
    records = list(records)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write report to {out_dir}: {exc}") from exc
    written = []
    if len(records) == 1:
        written.append(write_delays_csv(records[0], os.path.join(out_dir, "delays.csv")))
    else:
        for rec in records:
            written.append(write_delays_csv(rec, os.path.join(out_dir, f"delays_{_label(rec)}.csv")))
    rows = summarise(records)
    written.append(write_summary_csv(rows, os.path.join(out_dir, "summary.csv")))
    written.append(write_summary_table(rows, os.path.join(out_dir, "summary.md")))
    if plots:
        written.extend(write_boxplots(records, out_dir))
    return written


def save_record(rec: MetricsRecord, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "record.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(rec.to_json())
    write_delays_csv(rec, os.path.join(out_dir, "delays.csv"))
    return path


def load_record(in_dir: str) -> MetricsRecord:
    with open(os.path.join(in_dir, "record.json"), encoding="utf-8") as fh:
        text = fh.read()
    return MetricsRecord.from_json(text, read_delays_csv(os.path.join(in_dir, "delays.csv")))
