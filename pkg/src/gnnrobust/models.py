"""GCN and GIN built on message passing with a pluggable aggregator.

Each layer aggregates its *input* embeddings over the neighborhood and then
applies the learned transform:

* GCN: ``relu(AGG(H) W + b)`` over neighbors plus self-loop, symmetric
  degree normalization (so ``mean`` gives ``A_hat H W + b``);
* GIN: ``relu(MLP(H + AGG(H)))`` over neighbors only, epsilon fixed at 0.

The final layer skips the outer ReLU and yields logits; graph-level tasks
mean-pool node logits per member graph.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import os
import time
import weakref
from collections import OrderedDict
from typing import List

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .aggregators.config import NEEDS_CENTER, AggregatorConfig, LayerStats, StatsTable
from .aggregators.layer import Neighborhood, aggregate_layer
from .exceptions import ConfigurationError, ParseError, ShapeError

ARCHS = ("gcn", "gin")

_neighborhoods = weakref.WeakKeyDictionary()


def neighborhood(graph, arch):
    """Cached aggregation slots of ``graph`` for ``arch``."""
    per_graph = _neighborhoods.setdefault(graph, {})
    if arch not in per_graph:
        per_graph[arch] = Neighborhood.gcn(graph) if arch == "gcn" else Neighborhood.plain(graph)
    return per_graph[arch]


def _pool_matrix(graph):
    counts = np.bincount(graph.graph_ids, minlength=graph.num_graphs).astype(np.float32)
    vals = 1.0 / counts[graph.graph_ids]
    return sp.csr_matrix((vals, (graph.graph_ids, np.arange(graph.num_nodes))),
                         shape=(graph.num_graphs, graph.num_nodes))


@dataclasses.dataclass
class ForwardTrace:
    """Side outputs of one forward pass."""

    layer_inputs: List[np.ndarray] = dataclasses.field(default_factory=list)
    layer_outputs: List[np.ndarray] = dataclasses.field(default_factory=list)
    discarded: int = 0
    total: int = 0
    agg_seconds: float = 0.0

    @property
    def trimmed_fraction(self):
        return self.discarded / self.total if self.total else 0.0


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)


class GNN:
    """Parameters and forward pass of a 2-3 layer GCN or GIN."""

    def __init__(self, arch, in_dim, hidden, num_classes, n_layers=2, aggregator="mean",
                 dropout=0.5, task="node", seed=0):
        if arch not in ARCHS:
            raise ConfigurationError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
        if n_layers < 1:
            raise ConfigurationError("need at least one layer")
        if not 0 <= dropout < 1:
            raise ConfigurationError("dropout must lie in [0, 1)")
        self.arch = arch
        self.in_dim = int(in_dim)
        self.hidden = int(hidden)
        self.num_classes = int(num_classes)
        self.aggregator = AggregatorConfig.parse(aggregator)
        self.dropout = float(dropout)
        self.task = task
        self.seed = seed
        self.widths = [self.in_dim] + [self.hidden] * (n_layers - 1) + [self.num_classes]
        self.stats = None
        self.prune_masks = None
        self.fitting = False
        self.params = OrderedDict()
        rng = np.random.default_rng(seed)
        for i, (w_in, w_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            if arch == "gcn":
                self._add(f"layer{i}.weight", _glorot(rng, w_in, w_out))
                self._add(f"layer{i}.bias", np.zeros((1, w_out), np.float32))
            else:
                self._add(f"layer{i}.mlp0.weight", _glorot(rng, w_in, w_out))
                self._add(f"layer{i}.mlp0.bias", np.zeros((1, w_out), np.float32))
                self._add(f"layer{i}.mlp1.weight", _glorot(rng, w_out, w_out))
                self._add(f"layer{i}.mlp1.bias", np.zeros((1, w_out), np.float32))
        self._init_aggregator_params()

    def _add(self, name, value):
        self.params[name] = ad.Tensor(value, requires_grad=True, name=name)

    def _init_aggregator_params(self):
        for i, w_in in enumerate(self.widths[:-1]):
            key = f"layer{i}.m_g"
            if self.aggregator.kind in NEEDS_CENTER and key not in self.params:
                self._add(key, np.zeros((1, w_in), np.float32))
        if self.aggregator.kind == "combined" and "combine.s" not in self.params:
            self._add("combine.s", np.asarray([self.aggregator.init_scalars], np.float32))

    # --- bookkeeping ------------------------------------------------------
    @property
    def n_layers(self):
        return len(self.widths) - 1

    def weight_keys(self):
        """Transform weights and biases: the "model weights" fault site."""
        return [k for k in self.params if k.endswith(".weight") or k.endswith(".bias")]

    def prunable_keys(self):
        return [k for k in self.params if k.endswith(".weight")]

    def state(self):
        return OrderedDict((k, p.value) for k, p in self.params.items())

    def load_state(self, state):
        for k, v in state.items():
            if k not in self.params:
                raise ConfigurationError(f"unexpected parameter {k!r}")
            if np.shape(v) != self.params[k].value.shape:
                raise ShapeError(f"{k}: expected {self.params[k].value.shape}, got {np.shape(v)}")
            self.params[k] = ad.Tensor(np.array(v, dtype=np.float32), requires_grad=True, name=k)

    def clone(self):
        twin = copy.copy(self)
        twin.params = OrderedDict(
            (k, ad.Tensor(p.value.copy(), requires_grad=True, name=k)) for k, p in self.params.items())
        twin.stats = copy.deepcopy(self.stats)
        twin.prune_masks = copy.deepcopy(self.prune_masks)
        return twin

    def with_aggregator(self, aggregator):
        """Clone running a different aggregator on the same trained weights."""
        twin = self.clone()
        twin.aggregator = AggregatorConfig.parse(aggregator)
        twin._init_aggregator_params()
        return twin

    def with_weights(self, weights):
        twin = self.clone()
        twin.load_state(weights)
        return twin

    def config(self):
        return dict(arch=self.arch, in_dim=self.in_dim, hidden=self.hidden,
                    num_classes=self.num_classes, n_layers=self.n_layers,
                    aggregator=self.aggregator.to_string(), dropout=self.dropout,
                    task=self.task, seed=self.seed)

    # --- forward ----------------------------------------------------------
    def forward(self, graph, hooks=(), training=False, rng=None, trace=None):
        """Logits for every node (node task) or every member graph (graph task).

        ``hooks`` are called as ``hook(stage, matrix) -> matrix`` on the input
        features (stage 0) and after each layer (stage ``l + 1``).
        """
        if graph.num_features != self.in_dim:
            raise ShapeError(f"graph has {graph.num_features} features, model expects {self.in_dim}")
        if training and self.dropout > 0 and rng is None:
            raise ConfigurationError("training with dropout needs an rng")
        trace = trace if trace is not None else ForwardTrace()
        nb = neighborhood(graph, self.arch)
        H = ad.Tensor(graph.features)
        H = _run_hooks(hooks, 0, H)
        scalars = self.params.get("combine.s")
        for i in range(self.n_layers):
            trace.layer_inputs.append(H.value)
            stats = self.stats[i] if self.stats is not None else None
            t0 = time.perf_counter()
            res = aggregate_layer(self.aggregator, H, nb, stats=stats,
                                  center=self.params.get(f"layer{i}.m_g"), scalars=scalars,
                                  calibrated=not self.fitting)
            trace.agg_seconds += time.perf_counter() - t0
            trace.discarded += res.discarded
            trace.total += res.total
            if self.arch == "gcn":
                Z = self._dropout(res.out, training, rng)
                Z = Z @ self.params[f"layer{i}.weight"] + self.params[f"layer{i}.bias"]
            else:
                Z = self._dropout(H + res.out, training, rng)
                Z = ad.relu(Z @ self.params[f"layer{i}.mlp0.weight"] + self.params[f"layer{i}.mlp0.bias"])
                Z = Z @ self.params[f"layer{i}.mlp1.weight"] + self.params[f"layer{i}.mlp1.bias"]
            if i < self.n_layers - 1:
                Z = ad.relu(Z)
            trace.layer_outputs.append(Z.value)
            H = _run_hooks(hooks, i + 1, Z)
        if self.task == "graph":
            return ad.spmm(_pool_matrix(graph), H)
        return H

    def _dropout(self, x, training, rng):
        if not training or self.dropout == 0:
            return x
        keep = rng.random(x.value.shape) >= self.dropout
        return ad.mul(x, (keep / (1.0 - self.dropout)).astype(np.float32))

    def predict_logits(self, graph, hooks=(), trace=None):
        with ad.no_grad():
            return self.forward(graph, hooks=hooks, trace=trace).value


def _run_hooks(hooks, stage, H):
    for hook in hooks:
        H = ad.Tensor(hook(stage, H.value))
    return H


# --- pruning ----------------------------------------------------------------

def magnitude_prune(model, sparsity):
    """Globally zero the smallest-magnitude fraction of transform weights.

    Returns ``(pruned_model, achieved_sparsity)``.  The zeroed positions are
    remembered in ``prune_masks`` and stay zero through fine-tuning.
    """
    if not 0 <= sparsity < 1:
        raise ConfigurationError("sparsity must lie in [0, 1)")
    pruned = model.clone()
    keys = pruned.prunable_keys()
    flat = np.concatenate([np.abs(pruned.params[k].value).reshape(-1) for k in keys])
    k = int(np.floor(sparsity * flat.size + 1e-9))
    keep_flat = np.ones(flat.size, dtype=bool)
    keep_flat[np.argsort(flat, kind="stable")[:k]] = False
    if pruned.prune_masks:
        keep_flat &= np.concatenate([pruned.prune_masks[key].reshape(-1) for key in keys])
    masks, start = OrderedDict(), 0
    for key in keys:
        shape = pruned.params[key].value.shape
        size = int(np.prod(shape))
        masks[key] = keep_flat[start:start + size].reshape(shape)
        start += size
    pruned.prune_masks = masks
    apply_masks(pruned)
    return pruned, achieved_sparsity(pruned)


def apply_masks(model):
    if not model.prune_masks:
        return
    for key, keep in model.prune_masks.items():
        p = model.params[key]
        p.value = np.where(keep, p.value, np.float32(0)).astype(np.float32)


def achieved_sparsity(model):
    vals = np.concatenate([model.params[k].value.reshape(-1) for k in model.prunable_keys()])
    return float(np.count_nonzero(vals == 0)) / vals.size


# --- checkpoints ------------------------------------------------------------

MANIFEST = "manifest.txt"
BLOB = "tensors.bin"
CONFIG = "config.json"


def _checkpoint_tensors(model):
    out = OrderedDict((k, np.atleast_2d(v)) for k, v in model.state().items())
    if model.stats is not None:
        for i, st in enumerate(model.stats.layers):
            for field in ("mu", "sigma", "lo", "hi"):
                out[f"stats.{field}.{i}"] = getattr(st, field).reshape(1, -1)
        out["stats.count"] = np.asarray([[st.count for st in model.stats.layers]], np.float32)
    for key, keep in (model.prune_masks or {}).items():
        out[f"mask.{key}"] = keep.astype(np.float32)
    return out


def save_checkpoint(model, path, extra=None):
    """Write ``path/`` holding little-endian float32 tensors plus a text manifest.

    ``manifest.txt`` has one ``<key> <rows> <cols> <byte_offset>`` line per
    tensor; ``config.json`` holds the architecture.
    """
    os.makedirs(path, exist_ok=True)
    tensors = _checkpoint_tensors(model)
    offset, lines = 0, []
    with open(os.path.join(path, BLOB), "wb") as fh:
        for key, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(data.tobytes())
            lines.append(f"{key} {arr.shape[0]} {arr.shape[1]} {offset}")
            offset += data.nbytes
    with open(os.path.join(path, MANIFEST), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    cfg = model.config()
    if extra:
        cfg.update(extra)
    with open(os.path.join(path, CONFIG), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)


def read_tensors(path):
    blob = np.fromfile(os.path.join(path, BLOB), dtype="<f4")
    out = OrderedDict()
    with open(os.path.join(path, MANIFEST), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                key, rows, cols, offset = line.split()
                rows, cols, offset = int(rows), int(cols), int(offset)
            except ValueError:
                raise ParseError("manifest lines are '<key> <rows> <cols> <offset>'", lineno) from None
            start = offset // 4
            if start + rows * cols > blob.size:
                raise ParseError(f"tensor {key} runs past the end of {BLOB}", lineno)
            out[key] = blob[start:start + rows * cols].reshape(rows, cols).astype(np.float32)
    return out


def load_checkpoint(path):
    if not os.path.isdir(path):
        raise ConfigurationError(f"checkpoint {path!r} not found")
    with open(os.path.join(path, CONFIG), encoding="utf-8") as fh:
        cfg = json.load(fh)
    model = GNN(cfg["arch"], cfg["in_dim"], cfg["hidden"], cfg["num_classes"],
                n_layers=cfg["n_layers"], aggregator=cfg["aggregator"], dropout=cfg["dropout"],
                task=cfg["task"], seed=cfg.get("seed", 0))
    tensors = read_tensors(path)
    state = OrderedDict((k, v) for k, v in tensors.items() if k in model.params)
    for k in model.params:
        if k not in state:
            raise ParseError(f"checkpoint is missing tensor {k!r}")
    for k, v in state.items():
        if model.params[k].value.ndim == 2 and v.shape != model.params[k].value.shape:
            raise ShapeError(f"{k}: expected {model.params[k].value.shape}, got {v.shape}")
    model.load_state(state)
    if "stats.count" in tensors:
        counts = tensors["stats.count"].reshape(-1).astype(int)
        model.stats = StatsTable([
            LayerStats(*(tensors[f"stats.{f}.{i}"].reshape(-1) for f in ("mu", "sigma", "lo", "hi")),
                       count=int(counts[i]))
            for i in range(model.n_layers)])
    masks = OrderedDict((k[len("mask."):], v > 0.5) for k, v in tensors.items() if k.startswith("mask."))
    model.prune_masks = masks or None
    return model
