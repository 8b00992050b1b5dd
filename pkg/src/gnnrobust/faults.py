"""Random bit-flip fault model for float32 stores and binary adjacency.

Every bit of a store flips independently with probability ``ber``.  Rather
than scanning all bits we draw the flip count ``K ~ Binomial(bits, ber)`` and
then ``K`` distinct uniform positions, which has the same distribution and
costs O(K).
"""
from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ConfigurationError
from .graph import csr_from_keys

SITES = ("weights", "embeddings", "adjacency")
BITS_PER_WORD = 32


@dataclasses.dataclass(frozen=True)
class FaultSpec:
    site: str
    ber: float
    seed: int = 0

    def __post_init__(self):
        if self.site not in SITES:
            raise ConfigurationError(f"unknown fault site {self.site!r}; expected one of {SITES}")
        if not 0.0 <= self.ber <= 1.0:
            raise ConfigurationError(f"ber must lie in [0, 1], got {self.ber}")

    def rng(self):
        return np.random.default_rng(self.seed)


@dataclasses.dataclass
class InjectionReport:
    bits_total: int = 0
    bits_flipped: int = 0
    words_affected: int = 0

    def __iadd__(self, other):
        self.bits_total += other.bits_total
        self.bits_flipped += other.bits_flipped
        self.words_affected += other.words_affected
        return self


def flip_word(value, flip_mask):
    """Return the float32 whose bit pattern is ``value XOR flip_mask``."""
    bits = np.asarray(value, dtype=np.float32).view(np.uint32) ^ np.uint32(flip_mask)
    return bits.view(np.float32)[()] if np.ndim(bits) == 0 else bits.view(np.float32)


def distinct_positions(total, count, rng):
    """``count`` distinct uniform integers in ``[0, total)``.

    Duplicates are rejected and redrawn; past half the range the complement
    is drawn instead so ``count == total`` stays cheap.
    """
    if count <= 0:
        return np.zeros(0, dtype=np.int64)
    if count > total // 2:
        skip = distinct_positions(total, total - count, rng)
        keep = np.ones(total, dtype=bool)
        keep[skip] = False
        return np.flatnonzero(keep)
    chosen = np.unique(rng.integers(0, total, size=count, dtype=np.int64))
    while chosen.size < count:
        extra = rng.integers(0, total, size=count - chosen.size, dtype=np.int64)
        chosen = np.union1d(chosen, extra)
    return chosen


def sample_flip_count(total_bits, ber, rng):
    if ber <= 0.0 or total_bits == 0:
        return 0
    if ber >= 1.0:
        return int(total_bits)
    return int(rng.binomial(total_bits, ber))


def inject_matrix(m, ber, rng):
    """Flip each bit of the float32 matrix ``m`` independently with prob ``ber``.

    Returns a new array and an :class:`InjectionReport`; ``m`` is untouched.
    """
    arr = np.array(m, dtype=np.float32, copy=True)
    words = arr.reshape(-1).view(np.uint32)
    total = words.size * BITS_PER_WORD
    k = sample_flip_count(total, ber, rng)
    if k == 0:
        return arr, InjectionReport(total, 0, 0)
    pos = distinct_positions(total, k, rng)
    word_idx, bit_idx = np.divmod(pos, BITS_PER_WORD)
    masks = np.left_shift(np.uint32(1), bit_idx.astype(np.uint32))
    np.bitwise_xor.at(words, word_idx, masks)
    return arr, InjectionReport(total, k, int(np.unique(word_idx).size))


def inject_store(arrays, ber, rng):
    """Treat an ordered mapping of matrices as one contiguous memory store.

    A single flip count is drawn over all bits so that the fault rate is per
    bit regardless of how the store is split into matrices.
    """
    keys = list(arrays)
    flat = np.concatenate([np.asarray(arrays[k], dtype=np.float32).reshape(-1) for k in keys]) if keys else np.zeros(0, np.float32)
    flat, report = inject_matrix(flat, ber, rng)
    out, start = {}, 0
    for k in keys:
        shape = np.shape(arrays[k])
        size = int(np.prod(shape))
        out[k] = flat[start:start + size].reshape(shape)
        start += size
    return out, report


# --- adjacency --------------------------------------------------------------

def _pair_from_index(idx, n, directed):
    if directed:
        i, r = np.divmod(idx, n - 1)
        return i, r + (r >= i)
    # row i of the strict upper triangle starts at i*(2n - i - 1)/2
    rows = np.arange(n, dtype=np.int64)
    starts = rows * (2 * n - rows - 1) // 2
    i = np.searchsorted(starts, idx, side="right") - 1
    j = idx - starts[i] + i + 1
    return i, j


def toggle_edges(graph, rows, cols):
    """Flip adjacency entries ``(rows[t], cols[t])``; undirected toggles mirror."""
    n = graph.num_nodes
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if not graph.directed:
        rows, cols = np.concatenate([rows, cols]), np.concatenate([cols, rows])
    toggles = np.unique(rows * n + cols)
    src, dst = graph.edge_index()
    existing = src * n + dst
    keys = np.setxor1d(existing, toggles, assume_unique=True)
    indptr, indices = csr_from_keys(n, keys)
    return graph.with_structure(indptr, indices)


def inject_adjacency(graph, ber, rng, return_report=False):
    """Toggle entries of the logical N x N bit adjacency with probability ``ber``.

    Undirected graphs store the strict upper triangle and mirror each toggle;
    the diagonal is never stored (self-loops are added by the models).
    """
    n = graph.num_nodes
    total = n * (n - 1) if graph.directed else n * (n - 1) // 2
    k = sample_flip_count(total, ber, rng)
    pos = distinct_positions(total, k, rng)
    rows, cols = _pair_from_index(pos, n, graph.directed)
    out = toggle_edges(graph, rows, cols) if k else graph
    if return_report:
        return out, InjectionReport(total, k, k)
    return out


# --- embeddings -------------------------------------------------------------

class EmbeddingInjector:
    """Forward hook that corrupts every intercepted embedding matrix.

    Models call ``hook(stage, matrix)`` on the raw input features
    (``stage == 0``) and on each layer's output (``stage == l + 1``); the
    returned matrix is what the next layer consumes.
    """

    def __init__(self, ber, rng):
        self.ber = ber
        self.rng = rng
        self.fired = 0
        self.report = InjectionReport()

    def attach(self, model):
        if getattr(model, "n_layers", 0) < 1:
            raise ConfigurationError("embedding hooks need a model with layer boundaries")
        return self

    def __call__(self, stage, matrix):
        self.fired += 1
        out, rep = inject_matrix(matrix, self.ber, self.rng)
        self.report += rep
        return out


class BitFlipInjector(TransformerMixin, BaseEstimator):
    """Stateless transformer applying the bit-flip model to a float matrix.

    ``transform`` draws from ``np.random.default_rng(seed)`` afresh on every
    call, so repeated calls with the same input are bit-identical.
    """

    def __init__(self, ber=1e-5, seed=0):
        self.ber = ber
        self.seed = seed

    def fit(self, X, y=None):
        if not 0.0 <= self.ber <= 1.0:
            raise ConfigurationError(f"ber must lie in [0, 1], got {self.ber}")
        self.n_features_in_ = np.shape(X)[1]
        return self

    def transform(self, X):
        out, self.report_ = inject_matrix(np.asarray(X, dtype=np.float32),
                                          self.ber, np.random.default_rng(self.seed))
        return out
