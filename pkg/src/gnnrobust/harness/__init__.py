"""Experiment orchestration: sweeps, metrics, profiling and reports."""
from .metrics import affected_fraction, affected_rows, trimmed_fraction
from .profile import ProfileResult, profile, random_graph
from .report import mean_ci, pareto, report, summarize
from .sweep import DEFAULT_BERS, RunRecord, SweepSpec, read_records, run_cell, sweep

__all__ = [
    "affected_fraction", "affected_rows", "trimmed_fraction", "ProfileResult", "profile",
    "random_graph", "mean_ci", "pareto", "report", "summarize", "DEFAULT_BERS", "RunRecord",
    "SweepSpec", "read_records", "run_cell", "sweep",
]
