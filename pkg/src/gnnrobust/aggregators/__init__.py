"""Neighborhood aggregation functions: baselines and robust variants."""
from .config import KINDS, AggregatorConfig, LayerStats, StatsTable
from .layer import (
    AggregationResult,
    Neighborhood,
    aggregate_layer,
    cosine_prune,
)
from .reference import (
    aggregate,
    distribution_aggregate,
    dynamic_weight_aggregate,
    dynamic_weights,
    median_aggregate,
    soft_median_aggregate,
    trimmed_mean_aggregate,
)

__all__ = [
    "KINDS", "AggregatorConfig", "LayerStats", "StatsTable", "AggregationResult",
    "Neighborhood", "aggregate_layer", "cosine_prune", "aggregate",
    "distribution_aggregate", "dynamic_weight_aggregate", "dynamic_weights",
    "median_aggregate", "soft_median_aggregate", "trimmed_mean_aggregate",
]
