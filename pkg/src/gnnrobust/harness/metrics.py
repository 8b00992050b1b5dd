"""Per-run corruption metrics."""
from __future__ import annotations

import numpy as np

from ..exceptions import ContractError


def affected_rows(clean, faulty, rtol=1e-6):
    """Boolean per row: does any dimension differ from the clean run?

    A value counts as unchanged when it is bit-equal or within relative
    error ``rtol`` of the clean value.  NaN never equals anything.
    """
    clean = np.asarray(clean, dtype=np.float64)
    faulty = np.asarray(faulty, dtype=np.float64)
    if clean.shape != faulty.shape:
        raise ContractError(f"clean output {clean.shape} and faulty output {faulty.shape} differ in shape")
    with np.errstate(all="ignore"):
        same = (clean == faulty) | (np.abs(faulty - clean) <= rtol * np.abs(clean))
    return ~same.reshape(clean.shape[0], -1).all(axis=1)


def affected_fraction(clean, faulty, rtol=1e-6):
    """Share of final-layer embedding rows that changed under injection."""
    rows = affected_rows(clean, faulty, rtol)
    return float(rows.mean()) if rows.size else 0.0


def trimmed_fraction(discarded, total):
    """Discarded value slots over all aggregated value slots (0 when nothing aggregated)."""
    if hasattr(discarded, "discarded"):
        discarded, total = discarded.discarded, discarded.total
    return float(discarded) / float(total) if total else 0.0
