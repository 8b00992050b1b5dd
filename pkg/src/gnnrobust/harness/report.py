"""Summaries, confidence intervals and plot-data files for sweep records."""
from __future__ import annotations

import csv
import json
import math
import os
from collections import OrderedDict

import numpy as np
from scipy import stats as sstats

from ..exceptions import ContractError
from .sweep import RECORD_COLUMNS

SERIES_COLUMNS = ("aggregator", "site", "ber", "n", "accuracy_mean", "accuracy_ci_low",
                  "accuracy_ci_high", "trimmed_mean", "affected_mean")
PARETO_COLUMNS = ("aggregator", "accuracy_mean", "latency_s", "normalized_latency", "on_frontier")


def mean_ci(values, level=0.95):
    """Mean and two-sided Student-t confidence half-width."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ContractError("no values to summarize")
    m = float(x.mean())
    if x.size < 2:
        return m, 0.0
    sem = float(x.std(ddof=1)) / math.sqrt(x.size)
    return m, float(sstats.t.ppf(0.5 + level / 2, x.size - 1) * sem)


def group(records):
    out = OrderedDict()
    for r in records:
        out.setdefault((r.aggregator, r.site, r.ber), []).append(r)
    return out


def summarize(records):
    if not records:
        raise ContractError("cannot summarize an empty record list")
    cells = []
    for (agg, site, ber), rs in group(records).items():
        m, h = mean_ci([r.accuracy for r in rs])
        cells.append(OrderedDict(
            aggregator=agg, site=site, ber=ber, n=len(rs),
            accuracy_mean=m, accuracy_ci_low=m - h, accuracy_ci_high=m + h,
            trimmed_mean=float(np.mean([r.trimmed_fraction for r in rs])),
            affected_mean=float(np.mean([r.affected_fraction for r in rs])),
            latency_median_s=_median_latency(rs)))
    return OrderedDict(num_records=len(records), cells=cells, pareto=pareto(records))


def _median_latency(rs):
    lat = [r.latency_s for r in rs if np.isfinite(r.latency_s)]
    return float(np.median(lat)) if lat else None


def pareto(records, baseline="mean"):
    """Accuracy versus latency normalized to ``baseline`` per aggregator.

    Accuracy is averaged over the faulty cells (ber > 0) when there are any.
    """
    per_agg = OrderedDict()
    for r in records:
        per_agg.setdefault(r.aggregator, []).append(r)
    points = []
    for agg, rs in per_agg.items():
        faulty = [r for r in rs if r.ber > 0] or rs
        points.append([agg, float(np.mean([r.accuracy for r in faulty])), _median_latency(rs)])
    base = next((p[2] for p in points if p[0] == baseline and p[2]), None)
    if base is None:
        base = min((p[2] for p in points if p[2]), default=None)
    out = []
    for agg, acc, lat in points:
        norm = lat / base if (lat is not None and base) else None
        out.append(OrderedDict(aggregator=agg, accuracy_mean=acc, latency_s=lat,
                               normalized_latency=norm, on_frontier=False))
    timed = [p for p in out if p["normalized_latency"] is not None]
    for p in timed:
        p["on_frontier"] = not any(
            q is not p and q["normalized_latency"] <= p["normalized_latency"]
            and q["accuracy_mean"] >= p["accuracy_mean"]
            and (q["normalized_latency"] < p["normalized_latency"] or q["accuracy_mean"] > p["accuracy_mean"])
            for q in timed)
    return out


def write_csv(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow(r.csv_row())


def report(records, out_dir, write_records=True):
    """Write ``records.csv``, ``summary.json``, ``accuracy_vs_ber.csv`` and ``pareto.csv``."""
    summary = summarize(records)
    os.makedirs(out_dir, exist_ok=True)
    if write_records:
        write_csv(records, os.path.join(out_dir, "records.csv"))
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    with open(os.path.join(out_dir, "accuracy_vs_ber.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SERIES_COLUMNS)
        for c in summary["cells"]:
            w.writerow([c[k] if not isinstance(c[k], float) else repr(c[k]) for k in SERIES_COLUMNS])
    with open(os.path.join(out_dir, "pareto.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PARETO_COLUMNS)
        for p in summary["pareto"]:
            w.writerow(["" if p[k] is None else p[k] for k in PARETO_COLUMNS])
    return summary
