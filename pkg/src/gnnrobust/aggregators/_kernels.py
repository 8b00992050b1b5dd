"""Compiled per-edge kernels.

The cosine score of every (target, source) slot is a sampled dense-dense
product; gathering both endpoint rows with numpy would allocate two
``slots x dim`` copies, so it is done in a single compiled pass instead.
"""
import numba
import numpy as np


@numba.njit(cache=True, fastmath={"reassoc", "contract"})
def _dot(H, u, v):
    # reassociation lets the compiler vectorize the float64 accumulation;
    # NaN and Inf still propagate
    acc = 0.0
    for j in range(H.shape[1]):
        acc += np.float64(H[u, j]) * np.float64(H[v, j])
    return acc


@numba.njit(cache=True)
def _sq_norms(H):
    out = np.empty(H.shape[0], dtype=np.float64)
    for i in range(H.shape[0]):
        out[i] = _dot(H, i, i)
    return out


@numba.njit(cache=True)
def _cosine(H, u, v, sq):
    # sqrt(|u|^2 |v|^2) rather than |u| |v| so identical rows score exactly 1
    denom = np.sqrt(sq[u] * sq[v])
    if denom == 0.0:
        return 0.0
    s = _dot(H, u, v) / denom
    # NaN passes through both comparisons untouched
    if s > 1.0:
        s = 1.0
    elif s < -1.0:
        s = -1.0
    return s


@numba.njit(cache=True)
def _slot_cosine(H, dst, src, sq, out):
    for e in range(dst.size):
        out[e] = _cosine(H, dst[e], src[e], sq)


def slot_cosine(H, dst, src):
    """Cosine similarity between ``H[dst[e]]`` and ``H[src[e]]`` for each slot.

    Zero-norm pairs score 0; pairs involving NaN/Inf score NaN.
    """
    H = np.ascontiguousarray(H)
    out = np.empty(dst.size, dtype=np.float64)
    _slot_cosine(H, np.ascontiguousarray(dst), np.ascontiguousarray(src), _sq_norms(H), out)
    return out


# --- fused inference kernels ------------------------------------------------
# Used when no gradient is needed.  Each one walks the neighbor lists once
# (twice for cosine) instead of materializing slot-sized temporaries.

@numba.njit(cache=True)
def _interval_mask(H, lo, hi, kept_vals, kept, misses):
    n, dim = H.shape
    for i in range(n):
        m = 0
        for j in range(dim):
            x = H[i, j]
            if x > lo[j] and x < hi[j]:
                kept_vals[i, j] = x
                kept[i, j] = 1
            else:
                kept_vals[i, j] = 0
                kept[i, j] = 0
                m += 1
        misses[i] = m


@numba.njit(cache=True)
def _interval_mean(indptr, indices, weights, H, kept_vals, kept, scale, out):
    n, dim = H.shape
    num = np.zeros(dim, H.dtype)
    den = np.zeros(dim, H.dtype)
    for v in range(n):
        num[:] = 0
        den[:] = 0
        for s in range(indptr[v], indptr[v + 1]):
            u = indices[s]
            w = weights[s]
            for j in range(dim):
                num[j] += w * kept_vals[u, j]
                den[j] += w * kept[u, j]
        for j in range(dim):
            # weights are positive, so den > 0 exactly when a value survived
            if den[j] > 0:
                out[v, j] = num[j] / den[j] * scale[v]
            else:
                out[v, j] = H[v, j]


@numba.njit(cache=True)
def _center_weights(H, center):
    n, dim = H.shape
    w = np.zeros(n, H.dtype)
    for i in range(n):
        acc = 0.0
        for j in range(dim):
            d = np.float64(H[i, j]) - np.float64(center[j])
            acc += d * d
        r = 1.0 / (acc + 1.0)
        # NaN or Inf anywhere in the row makes acc non-finite
        if np.isfinite(acc) and r > 0.0:
            w[i] = r
    return w


@numba.njit(cache=True)
def _weighted_mean(indptr, indices, weights, H, w_row, scale, out):
    n, dim = H.shape
    num = np.zeros(dim, H.dtype)
    for v in range(n):
        num[:] = 0
        den = H.dtype.type(0)
        for s in range(indptr[v], indptr[v + 1]):
            u = indices[s]
            c = weights[s] * w_row[u]
            if c > 0:
                den += c
                for j in range(dim):
                    num[j] += c * H[u, j]
        if den > 0:
            for j in range(dim):
                out[v, j] = num[j] / den * scale[v]
        else:
            for j in range(dim):
                out[v, j] = H[v, j]


@numba.njit(cache=True)
def _cosine_mean(indptr, indices, H, sq, alpha, symmetric_norm, out):
    n, dim = H.shape
    keep = np.zeros(indices.size, np.bool_)
    kept = np.zeros(n, np.int64)
    for v in range(n):
        for s in range(indptr[v], indptr[v + 1]):
            u = indices[s]
            if symmetric_norm and u == v:
                keep[s] = True
            else:
                sim = _cosine(H, u, v, sq)
                keep[s] = sim >= alpha
            if keep[s]:
                kept[v] += 1
    for v in range(n):
        if kept[v] == 0:
            for j in range(dim):
                out[v, j] = H[v, j]
            continue
        for j in range(dim):
            out[v, j] = 0
        for s in range(indptr[v], indptr[v + 1]):
            if not keep[s]:
                continue
            u = indices[s]
            if symmetric_norm:
                c = H.dtype.type(1.0 / np.sqrt(np.float64(kept[v]) * kept[u]))
            else:
                c = H.dtype.type(1.0 / kept[v])
            for j in range(dim):
                out[v, j] += c * H[u, j]
    return indices.size - kept.sum()


def interval_mean(nb, H, lo, hi):
    kept_vals = np.empty_like(H)
    kept = np.empty_like(H)
    misses = np.empty(H.shape[0], dtype=np.int64)
    _interval_mask(H, np.asarray(lo, np.float64), np.asarray(hi, np.float64), kept_vals, kept, misses)
    out = np.empty_like(H)
    _interval_mean(nb.indptr, nb.indices, nb.weights.astype(H.dtype), H, kept_vals, kept,
                   _scale(nb, H.dtype), out)
    discarded = int((np.bincount(nb.indices, minlength=nb.n) * misses).sum())
    return out, discarded


def weighted_mean(nb, H, center):
    out = np.empty_like(H)
    w_row = _center_weights(H, np.ascontiguousarray(center, dtype=H.dtype).reshape(-1))
    _weighted_mean(nb.indptr, nb.indices, nb.weights.astype(H.dtype), H, w_row, _scale(nb, H.dtype), out)
    return out


def cosine_mean(nb, H, alpha):
    out = np.empty_like(H)
    pruned = _cosine_mean(nb.indptr, nb.indices, H, _sq_norms(H), float(alpha), nb.self_loops, out)
    return out, int(pruned)


def _scale(nb, dtype):
    if nb.self_loops:
        return nb.row_weight.astype(dtype)
    return np.ones(nb.n, dtype=dtype)
