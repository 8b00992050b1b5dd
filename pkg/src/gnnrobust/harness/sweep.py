"""BER sweeps over aggregators and fault sites.

Cells run in the fixed order aggregator -> site -> ber -> seed -> repeat.
Every cell draws its faults from ``default_rng([seed, repeat, site_index,
ber_index])``, so all aggregators face the same corruption and any cell can
be recomputed on its own.  Rows are appended to ``records.csv`` as they
finish; rerunning the same spec skips the rows already on disk.
"""
from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import io
import os
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from ..aggregators.config import AggregatorConfig
from ..exceptions import ConfigurationError, ContractError
from ..faults import SITES, EmbeddingInjector, inject_adjacency, inject_store
from ..models import ForwardTrace
from ..trainer import accuracy
from .metrics import affected_fraction, trimmed_fraction

DEFAULT_BERS = tuple(float(b) for b in np.logspace(-8, -3, 11))

RECORD_COLUMNS = ("model", "dataset", "aggregator", "site", "ber", "seed", "repeat",
                  "accuracy", "trimmed_fraction", "affected_fraction")
TIMING_COLUMNS = ("aggregator", "site", "ber", "seed", "repeat", "latency_s")


@dataclasses.dataclass(frozen=True)
class SweepSpec:
    checkpoint: str
    dataset: str
    aggregators: Tuple[str, ...]
    sites: Tuple[str, ...]
    bers: Tuple[float, ...] = DEFAULT_BERS
    seeds: Tuple[int, ...] = tuple(range(5))
    repeats: int = 10
    out: Optional[str] = None
    rtol: float = 1e-6
    workers: int = 1

    def __post_init__(self):
        set_ = object.__setattr__
        if isinstance(self.seeds, int):
            set_(self, "seeds", tuple(range(self.seeds)))
        set_(self, "aggregators", tuple(self.aggregators))
        set_(self, "sites", tuple(self.sites))
        set_(self, "bers", tuple(float(b) for b in self.bers))
        set_(self, "seeds", tuple(int(s) for s in self.seeds))
        self.validate()

    def validate(self):
        if not (self.aggregators and self.sites and self.bers and self.seeds):
            raise ConfigurationError("aggregator, site, BER and seed grids must all be non-empty")
        if self.repeats < 1:
            raise ConfigurationError("repeats must be at least 1")
        for agg in self.aggregators:
            AggregatorConfig.parse(agg)
        for site in self.sites:
            if site not in SITES:
                raise ConfigurationError(f"unknown fault site {site!r}; expected one of {SITES}")
        for ber in self.bers:
            if not 0.0 <= ber <= 1.0:
                raise ConfigurationError(f"ber must lie in [0, 1], got {ber}")
        if self.workers < 1:
            raise ConfigurationError("workers must be at least 1")

    def cells(self):
        for agg in self.aggregators:
            for si, site in enumerate(self.sites):
                for bi, ber in enumerate(self.bers):
                    for seed in self.seeds:
                        for rep in range(self.repeats):
                            yield Cell(agg, site, si, ber, bi, seed, rep)

    @property
    def num_cells(self):
        return len(self.aggregators) * len(self.sites) * len(self.bers) * len(self.seeds) * self.repeats


@dataclasses.dataclass(frozen=True)
class Cell:
    aggregator: str
    site: str
    site_index: int
    ber: float
    ber_index: int
    seed: int
    repeat: int

    def rng(self):
        return np.random.default_rng([self.seed, self.repeat, self.site_index, self.ber_index])


@dataclasses.dataclass
class RunRecord:
    model: str
    dataset: str
    aggregator: str
    site: str
    ber: float
    seed: int
    repeat: int
    accuracy: float
    trimmed_fraction: float
    affected_fraction: float
    latency_s: float = float("nan")

    def key(self):
        return (self.aggregator, self.site, self.ber, self.seed, self.repeat)

    def csv_row(self):
        return [self.model, self.dataset, self.aggregator, self.site, repr(self.ber), str(self.seed),
                str(self.repeat), repr(self.accuracy), repr(self.trimmed_fraction),
                repr(self.affected_fraction)]

    @classmethod
    def from_row(cls, row):
        return cls(row["model"], row["dataset"], row["aggregator"], row["site"], float(row["ber"]),
                   int(row["seed"]), int(row["repeat"]), float(row["accuracy"]),
                   float(row["trimmed_fraction"]), float(row["affected_fraction"]),
                   float(row.get("latency_s", "nan") or "nan"))


def run_cell(model, graph, cell, clean_final, mask="test", rtol=1e-6, model_name="", dataset=""):
    """Inject one fault realization and measure the corrupted inference."""
    rng = cell.rng()
    hooks, g, m = (), graph, model
    if cell.site == "weights":
        store = {k: model.params[k].value for k in model.weight_keys()}
        corrupted, _ = inject_store(store, cell.ber, rng)
        m = model.with_weights(corrupted)
    elif cell.site == "embeddings":
        hooks = (EmbeddingInjector(cell.ber, rng).attach(model),)
    else:
        g = inject_adjacency(graph, cell.ber, rng)
    trace = ForwardTrace()
    logits = m.predict_logits(g, hooks=hooks, trace=trace)
    mask = _resolve_mask(graph, mask)
    return RunRecord(
        model=model_name, dataset=dataset, aggregator=cell.aggregator, site=cell.site,
        ber=cell.ber, seed=cell.seed, repeat=cell.repeat,
        accuracy=accuracy(logits, graph.labels, mask),
        trimmed_fraction=trimmed_fraction(trace.discarded, trace.total),
        affected_fraction=affected_fraction(clean_final, trace.layer_outputs[-1], rtol),
        latency_s=trace.agg_seconds)


def clean_final_layer(model, graph):
    trace = ForwardTrace()
    model.predict_logits(graph, trace=trace)
    return trace.layer_outputs[-1]


def _resolve_mask(graph, mask):
    if isinstance(mask, str):
        return {"train": graph.train_mask, "val": graph.val_mask, "test": graph.test_mask}[mask]
    return np.asarray(mask, dtype=bool)


def _read_done(path):
    """Rows already on disk, dropping a trailing partial line if present."""
    if not os.path.exists(path):
        return []
    with open(path, "rb") as fh:
        data = fh.read()
    if data and not data.endswith(b"\n"):
        cut = data.rfind(b"\n") + 1
        with open(path, "r+b") as fh:
            fh.truncate(cut)
        data = data[:cut]
    text = data.decode("utf-8")
    if not text:
        return []
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != RECORD_COLUMNS:
        raise ContractError(f"{path} has an unexpected header; refusing to resume")
    return [RunRecord.from_row(r) for r in reader]


def _trim_timings(path, keep):
    """Keep the header and the first ``keep`` complete rows of ``timings.csv``."""
    lines = []
    if os.path.exists(path):
        with open(path, encoding="utf-8", newline="") as fh:
            lines = fh.read().split("\n")[:-1]
    if not lines:
        lines = [",".join(TIMING_COLUMNS)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines[:keep + 1]) + "\n")


def sweep(spec, model_for: Callable[[str], object], graph, mask="test", model_name="",
          progress: Optional[Callable[[RunRecord], None]] = None):
    """Run every cell of ``spec`` and return the full list of records.

    ``model_for(aggregator)`` supplies the trained model used for that
    aggregator.  With ``spec.out`` set, records stream to
    ``<out>/records.csv`` and latencies to ``<out>/timings.csv``.
    """
    spec.validate()
    models = {agg: model_for(agg) for agg in spec.aggregators}
    clean = {agg: clean_final_layer(m, graph) for agg, m in models.items()}
    records, writer, twriter, fh, tfh = [], None, None, None, None
    done = []
    if spec.out:
        os.makedirs(spec.out, exist_ok=True)
        path = os.path.join(spec.out, "records.csv")
        done = _read_done(path)
        fresh = not done
        fh = open(path, "a" if done else "w", newline="", encoding="utf-8")
        tpath = os.path.join(spec.out, "timings.csv")
        if done:
            _trim_timings(tpath, len(done))
        tfh = open(tpath, "a" if done else "w", newline="", encoding="utf-8")
        writer, twriter = csv.writer(fh, lineterminator="\n"), csv.writer(tfh, lineterminator="\n")
        if fresh:
            writer.writerow(RECORD_COLUMNS)
            twriter.writerow(TIMING_COLUMNS)
    cells = list(spec.cells())
    for rec, cell in zip(done, cells):
        if rec.key() != (cell.aggregator, cell.site, cell.ber, cell.seed, cell.repeat):
            raise ContractError("existing records do not match this sweep; use a fresh output directory")
    records.extend(done)
    todo = cells[len(done):]

    def work(cell):
        return run_cell(models[cell.aggregator], graph, cell, clean[cell.aggregator], mask,
                        spec.rtol, model_name, spec.dataset)

    try:
        if spec.workers > 1:
            pool = concurrent.futures.ThreadPoolExecutor(spec.workers)
            results = pool.map(work, todo)
        else:
            pool, results = None, map(work, todo)
        # consumed in submission order: this loop is the only writer
        for rec in results:
            records.append(rec)
            if writer is not None:
                writer.writerow(rec.csv_row())
                twriter.writerow([rec.aggregator, rec.site, repr(rec.ber), rec.seed, rec.repeat,
                                  repr(rec.latency_s)])
                fh.flush()
                tfh.flush()
            if progress is not None:
                progress(rec)
        if pool is not None:
            pool.shutdown()
    finally:
        if fh is not None:
            fh.close()
            tfh.close()
    return records


def read_records(path):
    """Load ``records.csv`` (plus ``timings.csv`` alongside it when present)."""
    recs = _read_done(path)
    tpath = os.path.join(os.path.dirname(path), "timings.csv")
    if os.path.exists(tpath):
        with open(tpath, newline="", encoding="utf-8") as fh:
            lat = {(r["aggregator"], r["site"], float(r["ber"]), int(r["seed"]), int(r["repeat"])):
                   float(r["latency_s"]) for r in csv.DictReader(fh)}
        for r in recs:
            r.latency_s = lat.get(r.key(), r.latency_s)
    return recs


def parse_bers(text: str) -> Sequence[float]:
    """``"1e-8,1e-5"`` or ``"logspace:1e-8:1e-3:11"``."""
    text = text.strip()
    if text.startswith("logspace:"):
        try:
            _, lo, hi, num = text.split(":")
            return tuple(float(b) for b in np.logspace(np.log10(float(lo)), np.log10(float(hi)), int(num)))
        except ValueError:
            raise ConfigurationError(f"bad BER range {text!r}") from None
    try:
        return tuple(float(b) for b in text.split(",") if b.strip())
    except ValueError:
        raise ConfigurationError(f"bad BER list {text!r}") from None
