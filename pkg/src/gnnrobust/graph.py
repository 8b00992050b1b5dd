"""Graph container, text dataset format and a planted-partition generator.

Structure is stored as compressed neighbor lists (``indptr``/``indices``,
the usual CSR pair): ``indices[indptr[v]:indptr[v + 1]]`` are the sorted
neighbors of ``v``. Self-loops are never stored; models add them logically.
"""
from __future__ import annotations

import dataclasses
import os
from typing import Optional

import numpy as np

from .exceptions import ConfigurationError, GraphValidationError, ParseError

TASKS = ("node", "graph")


def _frozen(arr, dtype):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclasses.dataclass(frozen=True, eq=False)
class Graph:
    """Immutable attributed graph for node- or graph-level classification.

    For ``task="graph"`` the object is a disjoint union of small graphs:
    ``graph_ids[v]`` names the member graph of node ``v`` and ``labels`` /
    masks are indexed by graph instead of by node.
    """

    features: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    num_classes: int
    directed: bool = False
    task: str = "node"
    graph_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "features", _frozen(self.features, np.float32))
        set_(self, "indptr", _frozen(self.indptr, np.int64))
        set_(self, "indices", _frozen(self.indices, np.int64))
        set_(self, "labels", _frozen(self.labels, np.int64))
        for name in ("train_mask", "val_mask", "test_mask"):
            set_(self, name, _frozen(getattr(self, name), bool))
        if self.graph_ids is not None:
            set_(self, "graph_ids", _frozen(self.graph_ids, np.int64))
        self.validate()

    # --- basic accessors --------------------------------------------------
    @property
    def num_nodes(self):
        return self.features.shape[0]

    @property
    def num_features(self):
        return self.features.shape[1]

    @property
    def num_edges(self):
        """Number of directed neighbor slots (an undirected edge counts twice)."""
        return int(self.indices.size)

    @property
    def num_graphs(self):
        if self.task == "node":
            return 1
        return int(self.labels.size)

    def degree(self, v):
        self._check_node(v)
        return int(self.indptr[v + 1] - self.indptr[v])

    def degrees(self):
        return np.diff(self.indptr)

    def neighbors(self, v):
        self._check_node(v)
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def neighbor_lists(self):
        return [self.indices[self.indptr[v]:self.indptr[v + 1]].tolist() for v in range(self.num_nodes)]

    def edge_index(self):
        """``(src, dst)`` arrays with one entry per stored neighbor slot."""
        dst = np.repeat(np.arange(self.num_nodes, dtype=np.int64), np.diff(self.indptr))
        return dst, self.indices.copy()

    def to_dense_adjacency(self):
        adj = np.zeros((self.num_nodes, self.num_nodes), dtype=bool)
        rows, cols = self.edge_index()
        adj[rows, cols] = True
        return adj

    def _check_node(self, v):
        if not 0 <= v < self.num_nodes:
            raise IndexError(f"node {v} out of range for graph with {self.num_nodes} nodes")

    # --- derived graphs ---------------------------------------------------
    def with_structure(self, indptr, indices):
        return dataclasses.replace(self, indptr=indptr, indices=indices)

    def with_features(self, features):
        return dataclasses.replace(self, features=features)

    # --- validation -------------------------------------------------------
    def is_symmetric(self):
        rows, cols = self.edge_index()
        n = self.num_nodes
        fwd = np.sort(rows * n + cols)
        bwd = np.sort(cols * n + rows)
        return np.array_equal(fwd, bwd)

    def validate(self):
        n = self.num_nodes
        if self.features.ndim != 2:
            raise GraphValidationError("features must be a 2-D matrix")
        if self.task not in TASKS:
            raise GraphValidationError(f"unknown task {self.task!r}")
        if self.indptr.shape != (n + 1,) or self.indptr[0] != 0 or self.indptr[-1] != self.indices.size:
            raise GraphValidationError("indptr does not describe the neighbor array")
        if np.any(np.diff(self.indptr) < 0):
            raise GraphValidationError("indptr must be non-decreasing")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= n):
            bad = int(self.indices.max()) if self.indices.max() >= n else int(self.indices.min())
            raise GraphValidationError(f"neighbor index {bad} outside [0, {n})")
        rows = np.repeat(np.arange(n), np.diff(self.indptr))
        if np.any(rows == self.indices):
            raise GraphValidationError("self-loops must not be stored")
        # sorted and duplicate-free within each list
        same_row = rows[1:] == rows[:-1]
        if np.any(same_row & (self.indices[1:] <= self.indices[:-1])):
            raise GraphValidationError("neighbor lists must be sorted without duplicates")
        if not self.directed and not self.is_symmetric():
            raise GraphValidationError("undirected graph has asymmetric adjacency")
        m = n if self.task == "node" else self.labels.size
        if self.task == "graph":
            if self.graph_ids is None or self.graph_ids.shape != (n,):
                raise GraphValidationError("graph task needs one graph id per node")
            if n and (self.graph_ids.min() < 0 or self.graph_ids.max() >= m):
                raise GraphValidationError("graph id out of range")
            if np.any(np.diff(self.graph_ids) < 0):
                raise GraphValidationError("nodes must be grouped by graph id")
        if self.labels.shape != (m,):
            raise GraphValidationError(f"expected {m} labels, got {self.labels.shape}")
        if m and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise GraphValidationError("label outside [0, num_classes)")
        masks = (self.train_mask, self.val_mask, self.test_mask)
        for mask in masks:
            if mask.shape != (m,):
                raise GraphValidationError(f"mask must have length {m}")
        if np.any(masks[0] & masks[1]) or np.any(masks[0] & masks[2]) or np.any(masks[1] & masks[2]):
            raise GraphValidationError("train/val/test masks overlap")


def csr_from_edges(num_nodes, src, dst, directed):
    """Build sorted, de-duplicated neighbor lists; self-loops are dropped."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= num_nodes):
        bad = max(src.max(), dst.max())
        raise GraphValidationError(f"neighbor index {int(bad)} outside [0, {num_nodes})")
    if not directed:
        src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
    keep = src != dst
    keys = np.unique(src[keep] * num_nodes + dst[keep])
    return csr_from_keys(num_nodes, keys)


def csr_from_keys(num_nodes, keys):
    """Neighbor lists from sorted unique ``row * num_nodes + col`` keys."""
    rows, cols = np.divmod(keys, num_nodes)
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=num_nodes), out=indptr[1:])
    return indptr, cols.astype(np.int64)


def degree(graph, v):
    return graph.degree(v)


def neighbors(graph, v):
    return graph.neighbors(v)


# --- graph-level batches ----------------------------------------------------

def batch_graphs(graphs, labels, num_classes, train_mask, val_mask, test_mask):
    """Disjoint union of node-only graphs into one graph-task :class:`Graph`.

    Node indices of member ``g`` are offset by the total size of members
    ``0..g-1``; ``graph_ids`` records membership for pooling.
    """
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs])
    feats = np.concatenate([g.features for g in graphs], axis=0)
    srcs, dsts = [], []
    for off, g in zip(offsets, graphs):
        s, d = g.edge_index()
        srcs.append(s + off)
        dsts.append(d + off)
    n = int(offsets[-1])
    keys = np.unique(np.concatenate(srcs) * n + np.concatenate(dsts)) if n else np.zeros(0, np.int64)
    indptr, indices = csr_from_keys(n, keys)
    graph_ids = np.repeat(np.arange(len(graphs)), [g.num_nodes for g in graphs])
    directed = any(g.directed for g in graphs)
    return Graph(feats, indptr, indices, labels, train_mask, val_mask, test_mask,
                 num_classes=num_classes, directed=directed, task="graph", graph_ids=graph_ids)


# --- text format ------------------------------------------------------------

def _parse_header(line, lineno):
    fields = {}
    for tok in line.split():
        if "=" not in tok:
            raise ParseError(f"malformed header token {tok!r}", lineno)
        key, val = tok.split("=", 1)
        fields[key] = val
    required = ("nodes", "feats", "classes", "directed", "task")
    missing = [k for k in required if k not in fields]
    if missing:
        raise ParseError(f"header missing {', '.join(missing)}", lineno)
    try:
        header = {
            "nodes": int(fields["nodes"]),
            "feats": int(fields["feats"]),
            "classes": int(fields["classes"]),
            "directed": int(fields["directed"]),
            "task": fields["task"],
            "graphs": int(fields.get("graphs", 1)),
        }
    except ValueError as exc:
        raise ParseError(f"bad header value: {exc}", lineno) from None
    if header["task"] not in TASKS:
        raise ParseError(f"task must be node or graph, got {header['task']!r}", lineno)
    if header["directed"] not in (0, 1):
        raise ParseError("directed must be 0 or 1", lineno)
    if header["task"] == "graph" and "graphs" not in fields:
        raise ParseError("graph task requires graphs=<G> in header", lineno)
    if header["nodes"] < 0 or header["feats"] < 1 or header["classes"] < 1:
        raise ParseError("nodes must be >= 0, feats and classes >= 1", lineno)
    return header


def _l1_normalize(features):
    """Row-normalize non-negative rows to unit sum (bag-of-words practice)."""
    out = features.copy()
    sums = out.sum(axis=1, dtype=np.float64)
    rows = (sums > 0) & np.all(out >= 0, axis=1)
    out[rows] = (out[rows] / sums[rows, None]).astype(np.float32)
    return out


def load_graph(path, normalize=True):
    """Read a graph from the line-oriented text format (see README)."""
    with open(path, encoding="utf-8") as fh:
        lines = [(i + 1, ln.strip()) for i, ln in enumerate(fh)]
    lines = [(i, ln) for i, ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise ParseError("empty file", 1)
    header = _parse_header(lines[0][1], lines[0][0])
    n, f, task = header["nodes"], header["feats"], header["task"]
    m = n if task == "node" else header["graphs"]
    body = lines[1:]
    if len(body) < 2 * n + 3:
        raise ParseError(f"expected at least {2 * n + 3} body lines, found {len(body)}",
                         body[-1][0] if body else lines[0][0])

    features = np.empty((n, f), dtype=np.float32)
    for row, (lineno, ln) in enumerate(body[:n]):
        toks = ln.split()
        if len(toks) != f:
            raise ParseError(f"expected {f} feature values, got {len(toks)}", lineno)
        try:
            features[row] = np.array([float(t) for t in toks], dtype=np.float32)
        except ValueError:
            raise ParseError("non-numeric feature value", lineno) from None

    graph_ids = None
    if task == "node":
        labels = np.empty(n, dtype=np.int64)
        for row, (lineno, ln) in enumerate(body[n:2 * n]):
            try:
                labels[row] = int(ln)
            except ValueError:
                raise ParseError(f"bad label {ln!r}", lineno) from None
    else:
        graph_ids = np.empty(n, dtype=np.int64)
        labels = np.full(m, -1, dtype=np.int64)
        for row, (lineno, ln) in enumerate(body[n:2 * n]):
            toks = ln.split()
            try:
                gid, lab = int(toks[0]), int(toks[1])
            except (ValueError, IndexError):
                raise ParseError("graph task label lines are '<graph_id> <label>'", lineno) from None
            if not 0 <= gid < m:
                raise ParseError(f"graph id {gid} outside [0, {m})", lineno)
            if labels[gid] not in (-1, lab):
                raise ParseError(f"graph {gid} has conflicting labels", lineno)
            graph_ids[row] = gid
            labels[gid] = lab
        if np.any(labels < 0):
            raise ParseError("some graph ids have no nodes", body[2 * n - 1][0] if n else lines[0][0])

    edge_lines = body[2 * n:-3]
    src = np.empty(len(edge_lines), dtype=np.int64)
    dst = np.empty(len(edge_lines), dtype=np.int64)
    for i, (lineno, ln) in enumerate(edge_lines):
        toks = ln.split()
        if len(toks) != 2:
            raise ParseError(f"edge lines are 'u v', got {ln!r}", lineno)
        try:
            src[i], dst[i] = int(toks[0]), int(toks[1])
        except ValueError:
            raise ParseError(f"non-integer edge endpoint in {ln!r}", lineno) from None

    masks = []
    for lineno, ln in body[-3:]:
        toks = ln.split()
        if len(toks) != m or any(t not in ("0", "1") for t in toks):
            raise ParseError(f"mask line must hold {m} values of 0/1", lineno)
        masks.append(np.array([t == "1" for t in toks]))

    directed = bool(header["directed"])
    indptr, indices = csr_from_edges(n, src, dst, directed)
    if normalize:
        features = _l1_normalize(features)
    return Graph(features, indptr, indices, labels, *masks, num_classes=header["classes"],
                 directed=directed, task=task, graph_ids=graph_ids)


def save_graph(graph, path):
    """Write ``graph`` in the text format; floats use 9 significant digits,
    which round-trips every float32 exactly."""
    n = graph.num_nodes
    header = (f"nodes={n} feats={graph.num_features} classes={graph.num_classes} "
              f"directed={int(graph.directed)} task={graph.task}")
    if graph.task == "graph":
        header += f" graphs={graph.num_graphs}"
    src, dst = graph.edge_index()
    if not graph.directed:
        keep = src < dst
        src, dst = src[keep], dst[keep]
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in graph.features:
            fh.write(" ".join(format(float(x), ".9g") for x in row) + "\n")
        if graph.task == "node":
            fh.writelines(f"{int(y)}\n" for y in graph.labels)
        else:
            fh.writelines(f"{int(g)} {int(graph.labels[g])}\n" for g in graph.graph_ids)
        fh.writelines(f"{int(u)} {int(v)}\n" for u, v in zip(src, dst))
        for mask in (graph.train_mask, graph.val_mask, graph.test_mask):
            fh.write(" ".join("1" if b else "0" for b in mask) + "\n")
    os.replace(tmp, path)


# --- synthetic data ---------------------------------------------------------

def _stratified_masks(labels, k, rng, fractions=(0.6, 0.2)):
    n = labels.size
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    for c in range(k):
        members = rng.permutation(np.flatnonzero(labels == c))
        n_train = int(round(fractions[0] * members.size))
        n_val = int(round(fractions[1] * members.size))
        train[members[:n_train]] = True
        val[members[n_train:n_train + n_val]] = True
        test[members[n_train + n_val:]] = True
    return train, val, test


def community_centroids(k, f):
    """Orthogonal unit-norm centroids: community ``c`` owns a block of dims."""
    if f < k:
        raise ConfigurationError(f"feature dim {f} must be >= number of communities {k}")
    block = f // k
    cents = np.zeros((k, f), dtype=np.float64)
    for c in range(k):
        cents[c, c * block:(c + 1) * block] = 1.0 / np.sqrt(block)
    return cents


def synth_planted_partition(n, k, p_in, p_out, f, noise, seed):
    """Planted-partition graph with noisy community-centroid features.

    Nodes ``0..n-1`` are split into ``k`` contiguous, equally sized
    communities; each unordered pair is linked independently with
    probability ``p_in`` (same community) or ``p_out``.  Labels are the
    communities and masks are a stratified 60/20/20 split.
    """
    if k < 2:
        raise ConfigurationError("k must be >= 2")
    if not (0 <= p_out < p_in <= 1):
        raise ConfigurationError("need 0 <= p_out < p_in <= 1")
    if noise < 0:
        raise ConfigurationError("noise std must be >= 0")
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) * k) // n
    srcs, dsts = [], []
    for i in range(n - 1):
        j = np.arange(i + 1, n)
        prob = np.where(labels[j] == labels[i], p_in, p_out)
        hit = j[rng.random(j.size) < prob]
        srcs.append(np.full(hit.size, i))
        dsts.append(hit)
    src = np.concatenate(srcs) if srcs else np.zeros(0, np.int64)
    dst = np.concatenate(dsts) if dsts else np.zeros(0, np.int64)
    indptr, indices = csr_from_edges(n, src, dst, directed=False)
    feats = community_centroids(k, f)[labels] + noise * rng.standard_normal((n, f))
    masks = _stratified_masks(labels, k, rng)
    return Graph(feats.astype(np.float32), indptr, indices, labels, *masks, num_classes=k)


def parse_synth_spec(spec):
    """``"synth:n=200,k=2,p_in=0.1,p_out=0.01,f=512,noise=0.3,seed=0"`` -> Graph."""
    if not spec.startswith("synth:"):
        raise ConfigurationError(f"not a synthetic dataset spec: {spec!r}")
    params = dict(n=200, k=2, p_in=0.1, p_out=0.01, f=512, noise=0.3, seed=0)
    for tok in filter(None, spec[len("synth:"):].split(",")):
        key, _, val = tok.partition("=")
        if key not in params:
            raise ConfigurationError(f"unknown synthetic parameter {key!r}")
        params[key] = type(params[key])(float(val)) if isinstance(params[key], int) else float(val)
    return synth_planted_partition(**params)


def resolve_dataset(name):
    """Load a dataset path or build a ``synth:`` graph."""
    if name.startswith("synth:"):
        return parse_synth_spec(name)
    if not os.path.exists(name):
        raise ConfigurationError(f"dataset {name!r} not found")
    return load_graph(name)
