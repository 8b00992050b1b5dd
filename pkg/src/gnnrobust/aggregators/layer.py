"""Vectorized aggregation over every target node of a layer at once.

A :class:`Neighborhood` lists, for each target ``v``, the *slots* it
aggregates over (source node + base weight).  Plain neighborhoods use unit
weights; GCN neighborhoods add the self-loop and use the symmetric
normalization ``1/sqrt(d_v d_u)``.  Every aggregator is a (robust) weighted
mean over slots, rescaled by the row weight sum ``S_v`` so that "mean" on a
GCN neighborhood is exactly ``A_hat @ H``.

All kinds run in O(dim * slots) except the sort-based order statistics.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np
import scipy.sparse as sp

from .. import autodiff as ad
from ..autodiff import _quiet
from ..exceptions import ConfigurationError, ShapeError
from . import _kernels
from ._kernels import slot_cosine
from .config import AggregatorConfig, require_stats
from .reference import trim_count



class Neighborhood:
    """Aggregation slots of every target node for one layer."""

    def __init__(self, n, indptr, indices, weights=None, self_loops=False):
        self.n = int(n)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.counts = np.diff(self.indptr)
        self.dst = np.repeat(np.arange(self.n, dtype=np.int64), self.counts)
        self.self_loops = self_loops
        if weights is None:
            weights = np.ones(self.indices.size, dtype=np.float32)
        self.weights = np.asarray(weights, dtype=np.float32)
        self.P = sp.csr_matrix((self.weights, self.indices, self.indptr), shape=(self.n, self.n))
        self.row_weight = np.asarray(self.P.sum(axis=1), dtype=np.float32).reshape(-1)
        self.has_slots = self.counts > 0
        self._cache = {}

    # --- constructors -----------------------------------------------------
    @classmethod
    def plain(cls, graph):
        return cls(graph.num_nodes, graph.indptr, graph.indices)

    @classmethod
    def gcn(cls, graph):
        n = graph.num_nodes
        src, dst = graph.edge_index()
        keys = np.concatenate([src * n + dst, np.arange(n, dtype=np.int64) * (n + 1)])
        keys.sort()
        rows, cols = np.divmod(keys, n)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
        return cls._normalized(n, indptr, cols)

    @classmethod
    def _normalized(cls, n, indptr, indices):
        counts = np.diff(indptr).astype(np.float64)
        dst = np.repeat(np.arange(n), np.diff(indptr))
        w = 1.0 / np.sqrt(counts[dst] * counts[indices])
        return cls(n, indptr, indices, w.astype(np.float32), self_loops=True)

    def prune(self, keep):
        """Neighborhood restricted to the slots where ``keep`` is true.

        Self-loop slots of GCN neighborhoods are always kept, and GCN weights
        are renormalized on the pruned degrees.
        """
        keep = np.asarray(keep, dtype=bool)
        if self.self_loops:
            keep = keep | (self.indices == self.dst)
        indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.dst[keep], minlength=self.n), out=indptr[1:])
        indices = self.indices[keep]
        if self.self_loops:
            return Neighborhood._normalized(self.n, indptr, indices)
        return Neighborhood(self.n, indptr, indices)

    # --- derived operators (cached) ---------------------------------------
    @property
    def num_slots(self):
        return int(self.indices.size)

    @property
    def scale(self):
        """Per-target multiplier ``S_v`` (None for plain neighborhoods)."""
        return self.row_weight[:, None] if self.self_loops else None

    @property
    def P_mean(self):
        if self.self_loops:
            return self.P
        if "P_mean" not in self._cache:
            inv = np.zeros(self.n, dtype=np.float32)
            inv[self.has_slots] = 1.0 / self.counts[self.has_slots]
            self._cache["P_mean"] = sp.csr_matrix((inv[self.dst], self.indices, self.indptr),
                                                  shape=(self.n, self.n))
        return self._cache["P_mean"]

    @property
    def P_struct(self):
        if "P_struct" not in self._cache:
            self._cache["P_struct"] = sp.csr_matrix(
                (np.ones(self.num_slots, dtype=np.float32), self.indices, self.indptr),
                shape=(self.n, self.n))
        return self._cache["P_struct"]

    @property
    def slot_to_target(self):
        if "R" not in self._cache:
            self._cache["R"] = sp.csr_matrix(
                (np.ones(self.num_slots, dtype=np.float32), np.arange(self.num_slots), self.indptr),
                shape=(self.n, self.num_slots))
        return self._cache["R"]

    @property
    def slot_from_source(self):
        if "Q" not in self._cache:
            self._cache["Q"] = sp.csr_matrix(
                (np.ones(self.num_slots, dtype=np.float32), (self.indices, np.arange(self.num_slots))),
                shape=(self.n, self.num_slots))
        return self._cache["Q"]

    @property
    def source_counts(self):
        if "src_counts" not in self._cache:
            self._cache["src_counts"] = np.bincount(self.indices, minlength=self.n)
        return self._cache["src_counts"]

    def buckets(self):
        """``[(degree, targets, first_slot)]`` grouping targets by slot count."""
        if "buckets" not in self._cache:
            out = []
            for d in np.unique(self.counts):
                if d == 0:
                    continue
                targets = np.flatnonzero(self.counts == d)
                out.append((int(d), targets, self.indptr[targets]))
            self._cache["buckets"] = out
        return self._cache["buckets"]


@dataclasses.dataclass
class AggregationResult:
    out: ad.Tensor
    discarded: int
    total: int


# --- building blocks --------------------------------------------------------

def _fallback(out, H, nb):
    """Targets without any slot keep their own embedding."""
    if nb.has_slots.all():
        return out
    return ad.select(nb.has_slots[:, None], out, H)


def _apply_scale(t, nb):
    scale = nb.scale
    return t if scale is None else ad.mul(t, scale)


def mean_aggregate(H, nb):
    return _fallback(ad.spmm(nb.P_mean, H), H, nb)


def sum_aggregate(H, nb):
    return _fallback(ad.spmm(nb.P, H), H, nb)


def slot_combine(H, nb, coef):
    """``out[v, j] = sum_slots coef[s, j] * H[src(s), j]`` (``coef`` constant).

    Slots with zero coefficient contribute exactly zero even when the source
    value is NaN or Inf.
    """
    Hv = ad._val(H)
    R, Q = nb.slot_to_target, nb.slot_from_source
    with _quiet:
        gathered = Hv[nb.indices]
        contrib = np.where(coef != 0, coef * gathered, np.zeros((), Hv.dtype))
        value = np.asarray(R @ contrib, dtype=Hv.dtype)

    def backward(g):
        with _quiet:
            return (np.asarray(Q @ (coef * g[nb.dst]), dtype=g.dtype),)

    return ad.custom(value, (H,), backward, "slot_combine")


def _sorted_rank_coefficients(Hv, nb, ranks_for_degree):
    """Coefficient matrix selecting ranked values per (target, dim)."""
    dim = Hv.shape[1]
    coef = np.zeros((nb.num_slots, dim), dtype=Hv.dtype)
    cols = np.arange(dim)[None, None, :]
    for d, targets, first in nb.buckets():
        ranks, weight = ranks_for_degree(d)
        if len(ranks) == 0:
            continue
        slots = first[:, None] + np.arange(d)[None, :]
        vals = Hv[nb.indices[slots]]                      # (m, d, dim)
        order = np.argsort(vals, axis=1, kind="stable")
        chosen = order[:, ranks, :]                       # (m, r, dim)
        coef[first[:, None, None] + chosen, cols] = weight
    return coef


def order_statistic(H, nb, ranks_for_degree):
    coef = _sorted_rank_coefficients(ad._val(H), nb, ranks_for_degree)
    return _fallback(_apply_scale(slot_combine(H, nb, coef), nb), H, nb)


def _median_ranks(d):
    if d % 2:
        return [d // 2], 1.0
    return [d // 2 - 1, d // 2], 0.5


def _max_ranks(d):
    return [d - 1], 1.0


def _trimmed_ranks(beta):
    def ranks(d):
        t = trim_count(d, beta)
        return list(range(t, d - t)), 1.0 / (d - 2 * t)
    return ranks


def soft_median_coefficients(Hv, nb, temperature):
    dim = Hv.shape[1]
    coef = np.zeros((nb.num_slots, dim), dtype=Hv.dtype)
    denom = temperature * math.sqrt(dim)
    with _quiet:
        for d, targets, first in nb.buckets():
            slots = first[:, None] + np.arange(d)[None, :]
            vals = Hv[nb.indices[slots]].astype(np.float64)
            s = np.sort(vals, axis=1)
            med = 0.5 * (s[:, (d - 1) // 2] + s[:, d // 2])
            dist = np.sqrt(((vals - med[:, None, :]) ** 2).sum(axis=2))
            logits = np.where(np.isfinite(dist), -dist / denom, -np.inf)
            top = logits.max(axis=1, keepdims=True)
            e = np.where(np.isfinite(logits), np.exp(logits - np.where(np.isfinite(top), top, 0.0)), 0.0)
            z = e.sum(axis=1, keepdims=True)
            w = np.where(z > 0, e / np.where(z > 0, z, 1.0), 0.0)
            coef[slots] = w[:, :, None].astype(Hv.dtype)
    return coef


def soft_median(H, nb, temperature):
    """Softmax-weighted mean around the dimension-wise median.

    The backward pass differentiates through the weights as well: through
    each slot's distance to the median and through the median itself (an
    order statistic, so its derivative selects the central values).
    """
    Hv = ad._val(H)
    coef = soft_median_coefficients(Hv, nb, temperature)
    w = coef[:, 0]
    live = w > 0
    alive = np.asarray(nb.slot_to_target @ live.astype(np.float32)).reshape(-1) > 0
    R, Q = nb.slot_to_target, nb.slot_from_source
    with _quiet:
        X = Hv[nb.indices]
        Xl = np.where(live[:, None], X, np.zeros((), Hv.dtype))
        value = np.asarray(R @ (w[:, None] * Xl), dtype=Hv.dtype)

    def backward(g):
        with _quiet:
            mcoef = _sorted_rank_coefficients(Hv, nb, _median_ranks)
            med = np.asarray(R @ np.where(mcoef != 0, mcoef * X, 0.0), dtype=np.float64)
            gs = g[nb.dst].astype(np.float64)
            dw = (gs * Xl).sum(axis=1)
            mean_dw = np.asarray(R @ (w * dw)).reshape(-1)[nb.dst]
            dlogit = w * (dw - mean_dw)
            ddist = -dlogit / (temperature * math.sqrt(Hv.shape[1]))
            diff = np.where(live[:, None], X - med[nb.dst], 0.0)
            dist = np.sqrt((diff * diff).sum(axis=1))
            unit = np.where((dist > 0)[:, None], diff / np.where(dist > 0, dist, 1.0)[:, None], 0.0)
            gdist = unit * ddist[:, None]
            gmed = -np.asarray(R @ gdist)
            slot_grad = w[:, None] * gs + gdist + mcoef * gmed[nb.dst]
            return (np.asarray(Q @ slot_grad, dtype=g.dtype),)

    out = _apply_scale(ad.custom(value, (H,), backward, "soft_median"), nb)
    return ad.select(alive[:, None], out, H)


def distribution_aggregate(H, nb, stats, a, b):
    """Mean over values strictly inside the calibrated interval, per dimension.

    Returns ``(tensor, discarded_value_slots)``.  Dimensions of a target with
    no surviving value fall back to the target's own value.
    """
    Hv = ad._val(H)
    lo, hi = stats.interval(a, b)
    with _quiet:
        keep = (Hv > lo) & (Hv < hi)
    miss = ~keep
    if miss.any():
        miss_sp = sp.csr_matrix(miss.astype(np.float32))
        lost_w = (nb.P @ miss_sp).toarray()
        lost_n = (nb.P_struct @ miss_sp).toarray()
        den = nb.row_weight[:, None] - lost_w
        alive = (nb.counts[:, None] - lost_n) > 0.5
        discarded = int((nb.source_counts * miss.sum(axis=1)).sum())
        masked = ad.where(keep, H)
    else:
        den = np.broadcast_to(nb.row_weight[:, None], Hv.shape)
        alive = np.broadcast_to(nb.has_slots[:, None], Hv.shape)
        discarded = 0
        masked = H
    num = ad.spmm(nb.P, masked)
    den = np.where(alive, den, 1.0).astype(Hv.dtype)
    out = _apply_scale(ad.div(num, den), nb)
    return ad.select(alive, out, H), discarded


def dynamic_weight_aggregate(H, nb, center):
    """Weighted mean with weight ``1 / (||h_u - m_g||^2 + 1)`` per source row."""
    Hv = ad._val(H)
    if ad._val(center).shape[-1] != Hv.shape[1]:
        raise ShapeError(f"center has width {ad._val(center).shape[-1]}, embeddings have {Hv.shape[1]}")
    with _quiet:
        finite = np.isfinite(Hv).all(axis=1, keepdims=True)
    diff = ad.sub(H, center)
    d2 = ad.sum_(ad.mul(diff, diff), axis=1, keepdims=True)
    w = ad.div(1.0, ad.add(d2, 1.0))
    with _quiet:
        ok = finite & np.isfinite(w.value) & (w.value > 0)
    w = ad.where(ok, w)
    clean = ad.where(ok, H)
    num = ad.spmm(nb.P, ad.mul(clean, w))
    den = ad.spmm(nb.P, w)
    alive = den.value > 0
    safe_den = ad.select(alive, den, np.ones((), dtype=Hv.dtype))
    out = _apply_scale(ad.div(num, safe_den), nb)
    return ad.select(alive, out, H)


def cosine_keep(H, nb, alpha):
    """Per-slot keep mask: cosine similarity of target and source >= alpha."""
    sim = slot_cosine(ad._val(H), nb.dst, nb.indices)
    return sim >= alpha


def cosine_aggregate(H, nb, alpha):
    keep = cosine_keep(H, nb, alpha)
    if nb.self_loops:
        keep |= nb.indices == nb.dst
    pruned = nb.prune(keep)
    return mean_aggregate(H, pruned), int(nb.num_slots - keep.sum())


def cosine_prune(graph, embeddings, alpha):
    """Neighbor lists of ``graph`` with low-similarity edges removed.

    Decisions are per (target, source) pair for this layer only; ``graph``
    itself is not modified.
    """
    nb = Neighborhood.plain(graph)
    keep = cosine_keep(np.asarray(embeddings, dtype=np.float32), nb, alpha)
    pruned = nb.prune(keep)
    return [pruned.indices[pruned.indptr[v]:pruned.indptr[v + 1]].tolist() for v in range(nb.n)]


def activation_clip(H, nb, stats):
    return mean_aggregate(ad.clip(H, stats.lo, stats.hi), nb)


def aggregate_layer(config, H, nb, stats=None, center=None, scalars=None, calibrated=True):
    """Apply the configured aggregator to every target of ``nb``.

    ``calibrated=False`` is the training phase: distribution-based trimming
    and clipping act as a plain mean (statistics do not exist yet).
    """
    config = AggregatorConfig.parse(config)
    H = ad.as_tensor(H)
    if H.value.ndim != 2 or H.value.shape[0] != nb.n:
        raise ShapeError(f"expected ({nb.n}, dim) embeddings, got {H.value.shape}")
    kind = config.kind
    dim = H.value.shape[1]
    total = nb.num_slots * dim
    discarded = 0
    if kind in _FUSED and calibrated and not _tracked(H, center, scalars):
        return _fused(config, H.value, nb, stats, center, scalars, total)
    if kind == "mean":
        out = mean_aggregate(H, nb)
    elif kind == "sum":
        out = sum_aggregate(H, nb)
    elif kind == "max":
        out = order_statistic(H, nb, _max_ranks)
    elif kind == "median":
        out = order_statistic(H, nb, _median_ranks)
        kept = np.where(nb.counts % 2 == 1, 1, 2) * nb.has_slots
        discarded = int(((nb.counts - kept) * dim).sum())
    elif kind == "trimmed_mean":
        out = order_statistic(H, nb, _trimmed_ranks(config.beta))
        t = np.array([trim_count(int(c), config.beta) for c in nb.counts], dtype=np.int64)
        discarded = int((2 * t * dim).sum())
    elif kind == "soft_median":
        out = soft_median(H, nb, config.temperature)
    elif kind == "activation_clip":
        out = mean_aggregate(H, nb) if not calibrated else activation_clip(H, nb, require_stats(stats, kind))
    elif kind == "distribution":
        if calibrated:
            out, discarded = distribution_aggregate(H, nb, require_stats(stats, kind), config.a, config.b)
        else:
            out = mean_aggregate(H, nb)
    elif kind == "dynamic_weight":
        out = dynamic_weight_aggregate(H, nb, _need_center(center))
    elif kind == "cosine":
        out, pruned = cosine_aggregate(H, nb, config.alpha)
        discarded = pruned * dim
    elif kind == "combined":
        if scalars is None:
            raise ConfigurationError("combined aggregation needs its three scalars")
        if calibrated:
            dist, d1 = distribution_aggregate(H, nb, require_stats(stats, kind), config.a, config.b)
        else:
            dist, d1 = mean_aggregate(H, nb), 0
        dyn = dynamic_weight_aggregate(H, nb, _need_center(center))
        cos, pruned = cosine_aggregate(H, nb, config.alpha)
        out = (ad.mul(ad.column(scalars, 0), dist) + ad.mul(ad.column(scalars, 1), dyn)
               + ad.mul(ad.column(scalars, 2), cos))
        discarded = d1 + pruned * dim
        total = 2 * total
    else:  # pragma: no cover
        raise AssertionError(kind)
    return AggregationResult(out, discarded, total)


_FUSED = ("distribution", "dynamic_weight", "cosine", "combined")


def _tracked(*tensors):
    return ad.is_grad_enabled() and any(isinstance(t, ad.Tensor) and t.requires_grad for t in tensors)


def _fused(config, Hv, nb, stats, center, scalars, total):
    """Inference-only route through the compiled kernels (no tape)."""
    Hv = np.ascontiguousarray(Hv)
    dim = Hv.shape[1]
    kind = config.kind
    if kind == "distribution":
        out, discarded = _kernels.interval_mean(nb, Hv, *require_stats(stats, kind).interval(config.a, config.b))
    elif kind == "dynamic_weight":
        out, discarded = _kernels.weighted_mean(nb, Hv, _check_center(center, dim)), 0
    elif kind == "cosine":
        out, pruned = _kernels.cosine_mean(nb, Hv, config.alpha)
        discarded = pruned * dim
    else:
        if scalars is None:
            raise ConfigurationError("combined aggregation needs its three scalars")
        s = ad._val(scalars).reshape(-1).astype(Hv.dtype)
        dist, d1 = _kernels.interval_mean(nb, Hv, *require_stats(stats, kind).interval(config.a, config.b))
        dyn = _kernels.weighted_mean(nb, Hv, _check_center(center, dim))
        cos, pruned = _kernels.cosine_mean(nb, Hv, config.alpha)
        with _quiet:
            out = s[0] * dist + s[1] * dyn + s[2] * cos
        discarded, total = d1 + pruned * dim, 2 * total
    return AggregationResult(ad.Tensor(out, dtype=Hv.dtype), discarded, total)


def _check_center(center, dim):
    c = ad._val(_need_center(center))
    if c.shape[-1] != dim:
        raise ShapeError(f"center has width {c.shape[-1]}, embeddings have {dim}")
    return c


def _need_center(center):
    if center is None:
        raise ConfigurationError("dynamic-weight aggregation needs a center embedding m_g")
    return center
