"""Aggregator selection, hyperparameters and calibrated statistics."""
from __future__ import annotations

import dataclasses
from typing import List, Optional

import numpy as np

from ..exceptions import ConfigurationError

KINDS = (
    "mean", "max", "sum", "median", "trimmed_mean", "soft_median",
    "activation_clip", "distribution", "dynamic_weight", "cosine", "combined",
)

# kinds whose inference depends on calibrated per-(layer, dim) statistics
NEEDS_STATS = ("distribution", "activation_clip", "combined")
# kinds with a learnable center per layer
NEEDS_CENTER = ("dynamic_weight", "combined")


@dataclasses.dataclass(frozen=True)
class AggregatorConfig:
    """Which aggregation function to use and its hyperparameters.

    Only the fields relevant to ``kind`` are consulted; defaults are the
    usual starting points (a = b = 3 sigma, alpha = 0, beta = 0.1, T = 1).
    """

    kind: str = "mean"
    a: float = 3.0
    b: float = 3.0
    alpha: float = 0.0
    beta: float = 0.1
    temperature: float = 1.0
    init_scalars: tuple = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown aggregator {self.kind!r}; expected one of {KINDS}")
        if not (self.a > 0 and self.b > 0):
            raise ConfigurationError("distribution bounds a, b must be positive")
        if not 0 <= self.beta < 0.5:
            raise ConfigurationError("trimmed-mean beta must lie in [0, 0.5)")
        if not self.temperature > 0:
            raise ConfigurationError("soft-median temperature must be positive")
        if not -1 <= self.alpha <= 1:
            raise ConfigurationError("cosine threshold alpha must lie in [-1, 1]")
        if len(self.init_scalars) != 3:
            raise ConfigurationError("combined aggregator needs exactly three scalars")

    @classmethod
    def parse(cls, text):
        """``"kind"`` or ``"kind:key=val,key=val"``, e.g. ``"cosine:alpha=0.5"``."""
        if isinstance(text, cls):
            return text
        kind, _, rest = str(text).partition(":")
        fields = {f.name for f in dataclasses.fields(cls)} - {"kind", "init_scalars"}
        kwargs = {}
        for tok in filter(None, rest.split(",")):
            key, _, val = tok.partition("=")
            key = key.strip()
            if key not in fields:
                raise ConfigurationError(f"unknown aggregator parameter {key!r}")
            try:
                kwargs[key] = float(val)
            except ValueError:
                raise ConfigurationError(f"bad value for {key}: {val!r}") from None
        return cls(kind=kind.strip(), **kwargs)

    def to_string(self):
        defaults = AggregatorConfig()
        extras = [f"{f}={getattr(self, f)!r}" for f in ("a", "b", "alpha", "beta", "temperature")
                  if getattr(self, f) != getattr(defaults, f)]
        return self.kind + (":" + ",".join(extras) if extras else "")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass
class LayerStats:
    """Clean per-dimension statistics of one layer's input embeddings."""

    mu: np.ndarray
    sigma: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    count: int

    @classmethod
    def from_samples(cls, h):
        h = np.asarray(h, dtype=np.float64)
        if h.shape[0] < 2:
            raise ConfigurationError("need at least two samples per dimension to calibrate")
        return cls(
            mu=h.mean(axis=0).astype(np.float32),
            sigma=h.std(axis=0, ddof=1).astype(np.float32),
            lo=h.min(axis=0).astype(np.float32),
            hi=h.max(axis=0).astype(np.float32),
            count=int(h.shape[0]),
        )

    def interval(self, a, b):
        mu = self.mu.astype(np.float64)
        sigma = self.sigma.astype(np.float64)
        return mu - a * sigma, mu + b * sigma


@dataclasses.dataclass
class StatsTable:
    layers: List[LayerStats]

    @classmethod
    def from_layer_inputs(cls, inputs):
        return cls([LayerStats.from_samples(h) for h in inputs])

    def __getitem__(self, layer):
        return self.layers[layer]

    def __len__(self):
        return len(self.layers)


def require_stats(stats: Optional[LayerStats], kind):
    if stats is None:
        raise ConfigurationError(f"{kind} aggregation needs calibrated statistics; run calibration first")
    if stats.count < 2:
        raise ConfigurationError("statistics were computed from fewer than two samples")
    return stats
