"""Per-target aggregation over an explicit set of neighbor rows.

These are the straightforward definitions, one target node at a time.  The
vectorized layer code in :mod:`.layer` must agree with them; tests use them
as the oracle.  Rows are ``(n_neighbors, dim)`` float arrays.

Non-finite values sort after every finite value (``np.sort`` semantics), so
order statistics stay finite while fewer than half the values are corrupt.
"""
from __future__ import annotations

import math

import numpy as np

from ..autodiff import _quiet
from ..exceptions import ConfigurationError, ShapeError
from .config import AggregatorConfig, require_stats



def _rows(rows, dim=None):
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows.reshape(-1, 1) if dim in (None, 1) else rows.reshape(-1, dim)
    if dim is not None and rows.shape[1] != dim:
        raise ShapeError(f"neighbor rows have width {rows.shape[1]}, target has {dim}")
    return rows


def trim_count(n, beta):
    """Number of values dropped from *each* end by a beta-trimmed mean."""
    return int(math.floor(beta * n + 1e-9))


@_quiet
def mean_aggregate(rows):
    return _rows(rows).mean(axis=0)


def sum_aggregate(rows):
    return _rows(rows).sum(axis=0)


def max_aggregate(rows):
    return np.sort(_rows(rows), axis=0)[-1]


def median_aggregate(rows):
    s = np.sort(_rows(rows), axis=0)
    n = s.shape[0]
    return 0.5 * (s[(n - 1) // 2] + s[n // 2])


@_quiet
def trimmed_mean_aggregate(rows, beta):
    s = np.sort(_rows(rows), axis=0)
    t = trim_count(s.shape[0], beta)
    return s[t:s.shape[0] - t].mean(axis=0)


@_quiet
def soft_median_weights(rows, temperature):
    rows = _rows(rows)
    med = median_aggregate(rows)
    dist = np.sqrt(((rows - med) ** 2).sum(axis=1))
    dist[~np.isfinite(dist)] = np.inf
    logits = -dist / (temperature * math.sqrt(rows.shape[1]))
    if not np.isfinite(logits).any():
        return np.zeros(rows.shape[0])
    e = np.exp(logits - logits[np.isfinite(logits)].max())
    return e / e.sum()


@_quiet
def soft_median_aggregate(rows, temperature):
    rows = _rows(rows)
    w = soft_median_weights(rows, temperature)
    return (np.where(w[:, None] > 0, rows, 0.0) * w[:, None]).sum(axis=0)


@_quiet
def activation_clip(rows, lo, hi):
    return np.clip(_rows(rows), lo, hi).mean(axis=0)


@_quiet
def distribution_mask(rows, mu, sigma, a, b):
    """True where a value lies strictly inside ``(mu - a*sigma, mu + b*sigma)``."""
    rows = _rows(rows)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    return (rows > mu - a * sigma) & (rows < mu + b * sigma)


@_quiet
def distribution_aggregate(rows, mu, sigma, a, b, fallback=None):
    """Average per dimension only the values inside the calibrated interval.

    Returns ``(row, discarded)``.  Dimensions where nothing survives take the
    ``fallback`` value (the target's own embedding) or NaN if none is given.
    """
    rows = _rows(rows)
    keep = distribution_mask(rows, mu, sigma, a, b)
    count = keep.sum(axis=0)
    total = np.where(keep, rows, 0.0).sum(axis=0)
    out = total / np.maximum(count, 1)
    if fallback is not None:
        out = np.where(count > 0, out, np.asarray(fallback, dtype=np.float64))
    else:
        out = np.where(count > 0, out, np.nan)
    return out, int(keep.size - keep.sum())


@_quiet
def dynamic_weights(rows, center):
    """``1 / (||h_u - m_g||^2 + 1)``; zero for rows with any non-finite value."""
    rows = _rows(rows)
    d2 = ((rows - np.asarray(center, dtype=np.float64)) ** 2).sum(axis=1)
    w = 1.0 / (d2 + 1.0)
    w[~np.all(np.isfinite(rows), axis=1)] = 0.0
    w[~np.isfinite(w)] = 0.0
    return w


@_quiet
def dynamic_weight_aggregate(rows, center, fallback=None):
    rows = _rows(rows)
    w = dynamic_weights(rows, center)
    if w.sum() <= 0:
        return None if fallback is None else np.asarray(fallback, dtype=np.float64)
    clean = np.where(w[:, None] > 0, rows, 0.0)
    return (w[:, None] * clean).sum(axis=0) / w.sum()


@_quiet
def cosine_similarity(target, rows):
    """Cosine similarity of ``target`` against each row; zero-norm pairs score 0."""
    rows = _rows(rows)
    target = np.asarray(target, dtype=np.float64)
    dots = (rows * target).sum(axis=1)
    # sqrt of the product of squared norms: identical rows give exactly 1
    denom = np.sqrt((rows * rows).sum(axis=1) * (target * target).sum())
    # only an exact zero norm scores 0; NaN/Inf rows yield NaN and get pruned
    sim = np.where(denom == 0, 0.0, dots / np.where(denom == 0, 1.0, denom))
    return sim


def cosine_keep(target, rows, alpha):
    """Neighbors to keep: similarity at least ``alpha`` (NaN similarity never is)."""
    sim = np.clip(cosine_similarity(target, rows), -1.0, 1.0)
    return sim >= alpha


@_quiet
def cosine_aggregate(target, rows, alpha):
    """Mean over neighbors surviving cosine pruning, or None if none survive."""
    rows = _rows(rows)
    keep = cosine_keep(target, rows, alpha)
    if not keep.any():
        return None, int(keep.size)
    return rows[keep].mean(axis=0), int((~keep).sum())


def aggregate(config, neighbor_rows, target_row, stats=None, center=None, scalars=None,
              return_discarded=False):
    """Aggregate ``neighbor_rows`` into one row for a single target node.

    With zero neighbors, or when every neighbor is filtered out, the target's
    own embedding is returned.
    """
    config = AggregatorConfig.parse(config)
    target = np.asarray(target_row, dtype=np.float64).reshape(-1)
    dim = target.size
    rows = np.asarray(neighbor_rows, dtype=np.float64)
    rows = _rows(rows if rows.ndim == 2 else rows.reshape(-1, dim), dim)
    kind = config.kind
    discarded = 0
    if rows.shape[0] == 0:
        out = target.copy()
    elif kind == "mean":
        out = mean_aggregate(rows)
    elif kind == "sum":
        out = sum_aggregate(rows)
    elif kind == "max":
        out = max_aggregate(rows)
    elif kind == "median":
        out = median_aggregate(rows)
        discarded = (rows.shape[0] - (1 if rows.shape[0] % 2 else 2)) * dim
    elif kind == "trimmed_mean":
        out = trimmed_mean_aggregate(rows, config.beta)
        discarded = 2 * trim_count(rows.shape[0], config.beta) * dim
    elif kind == "soft_median":
        w = soft_median_weights(rows, config.temperature)
        out = soft_median_aggregate(rows, config.temperature) if w.sum() > 0 else target.copy()
    elif kind == "activation_clip":
        st = require_stats(stats, kind)
        out = activation_clip(rows, st.lo, st.hi)
    elif kind == "distribution":
        st = require_stats(stats, kind)
        out, discarded = distribution_aggregate(rows, st.mu, st.sigma, config.a, config.b, fallback=target)
    elif kind == "dynamic_weight":
        out = dynamic_weight_aggregate(rows, _center(center, dim), fallback=target)
    elif kind == "cosine":
        out, discarded = cosine_aggregate(target, rows, config.alpha)
        if out is None:
            out = target.copy()
        discarded *= dim
    elif kind == "combined":
        s = np.asarray(config.init_scalars if scalars is None else scalars, dtype=np.float64).reshape(-1)
        st = require_stats(stats, kind)
        dist, d1 = distribution_aggregate(rows, st.mu, st.sigma, config.a, config.b, fallback=target)
        dyn = dynamic_weight_aggregate(rows, _center(center, dim), fallback=target)
        cos, d2 = cosine_aggregate(target, rows, config.alpha)
        if cos is None:
            cos = target.copy()
        out = s[0] * dist + s[1] * dyn + s[2] * cos
        discarded = d1 + d2 * dim
    else:  # pragma: no cover - config validation guards this
        raise AssertionError(kind)
    return (out, discarded) if return_discarded else out


def _center(center, dim):
    if center is None:
        raise ConfigurationError("dynamic-weight aggregation needs a center embedding m_g")
    center = np.asarray(center, dtype=np.float64).reshape(-1)
    if center.size != dim:
        raise ShapeError(f"center has width {center.size}, embeddings have {dim}")
    return center
