"""Aggregation latency versus graph size."""
from __future__ import annotations

import dataclasses
import time
from typing import Dict, List

import numpy as np

from .. import autodiff as ad
from ..aggregators.config import AggregatorConfig, LayerStats
from ..aggregators.layer import Neighborhood, aggregate_layer
from ..exceptions import ConfigurationError
from ..graph import Graph, csr_from_edges

DEFAULT_SIZES = (10_000, 30_000, 100_000)
DEFAULT_AGGS = ("mean", "median", "trimmed_mean", "soft_median", "activation_clip",
                "distribution", "dynamic_weight", "cosine", "combined")


def random_graph(num_edges, dim=64, avg_degree=10, seed=0):
    """Undirected random graph with about ``num_edges`` neighbor slots."""
    rng = np.random.default_rng(seed)
    n = max(2, num_edges // avg_degree)
    pairs = num_edges // 2
    src = rng.integers(0, n, size=pairs * 2)
    dst = rng.integers(0, n, size=pairs * 2)
    keys = np.unique(np.minimum(src, dst) * n + np.maximum(src, dst))
    keys = keys[(keys // n) != (keys % n)]
    keys = rng.permutation(keys)[:pairs]
    indptr, indices = csr_from_edges(n, keys // n, keys % n, directed=False)
    feats = rng.standard_normal((n, dim)).astype(np.float32)
    zeros = np.zeros(n, dtype=bool)
    return Graph(feats, indptr, indices, np.zeros(n, dtype=np.int64), zeros, zeros, zeros, num_classes=1)


@dataclasses.dataclass
class LinearFit:
    slope: float
    intercept: float
    r2: float


@dataclasses.dataclass
class ProfileResult:
    sizes: List[int]
    latency: Dict[str, List[float]]  # aggregator -> median seconds per size

    def ratio(self, aggregator, size_index=-1, baseline="mean"):
        return self.latency[aggregator][size_index] / self.latency[baseline][size_index]

    def fit(self, aggregator):
        x = np.asarray(self.sizes, dtype=np.float64)
        y = np.asarray(self.latency[aggregator], dtype=np.float64)
        slope, intercept = np.polyfit(x, y, 1)
        resid = y - (slope * x + intercept)
        ss_tot = float(((y - y.mean()) ** 2).sum())
        r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
        return LinearFit(float(slope), float(intercept), r2)

    def rows(self):
        """``(aggregator, num_edges, median_seconds, ratio_vs_mean)`` tuples."""
        out = []
        for agg, times in self.latency.items():
            for i, size in enumerate(self.sizes):
                ratio = self.ratio(agg, i) if "mean" in self.latency else float("nan")
                out.append((agg, size, times[i], ratio))
        return out


def _time(fn, warmup, iters):
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples))


def profile(aggregators=DEFAULT_AGGS, sizes=DEFAULT_SIZES, dim=64, warmup=3, iters=30, seed=0):
    """Median inference latency of one aggregation pass per aggregator and size.

    Only the aggregation call is timed; graph construction and calibration
    happen outside the measured region.
    """
    if warmup < 3 or iters < 30:
        raise ConfigurationError("profiling needs at least 3 warmup and 30 measured iterations")
    configs = [AggregatorConfig.parse(a) for a in aggregators]
    if not any(c.kind == "mean" for c in configs):
        configs.insert(0, AggregatorConfig("mean"))
    sizes = sorted(int(s) for s in sizes)
    if len(sizes) < 2:
        raise ConfigurationError("need at least two graph sizes for a fit")
    latency = {c.to_string(): [] for c in configs}
    for size in sizes:
        graph = random_graph(size, dim=dim, seed=seed)
        nb = Neighborhood.plain(graph)
        H = ad.Tensor(graph.features)
        stats = LayerStats.from_samples(graph.features)
        center = ad.Tensor(graph.features.mean(axis=0, keepdims=True))
        scalars = ad.Tensor(np.full((1, 3), 1 / 3, dtype=np.float32))
        for cfg in configs:
            def run(cfg=cfg):
                with ad.no_grad():
                    aggregate_layer(cfg, H, nb, stats=stats, center=center, scalars=scalars)
            latency[cfg.to_string()].append(_time(run, warmup, iters))
    return ProfileResult(sizes, latency)
