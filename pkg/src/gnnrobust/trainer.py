"""Clean training, post-training calibration and evaluation."""
from __future__ import annotations

import dataclasses
import math
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .aggregators.config import StatsTable
from .exceptions import ConfigurationError, ContractError, TrainingError
from .models import ForwardTrace, apply_masks

OPTIMIZERS = ("sgd", "adam")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings.  ``lr = 0`` is allowed (a no-op run)."""

    epochs: int = 200
    lr: float = 0.01
    weight_decay: float = 5e-4
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.0
    seed: int = 0
    patience: Optional[int] = 100

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be at least 1")
        if not self.lr >= 0:
            raise ConfigurationError("learning rate must be non-negative")
        if self.weight_decay < 0:
            raise ConfigurationError("weight decay must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if self.patience is not None and self.patience < 1:
            raise ConfigurationError("patience must be at least 1")


class SGD:
    def __init__(self, params, lr, weight_decay=0.0, momentum=0.0):
        self.params = params
        self.lr, self.weight_decay, self.momentum = lr, weight_decay, momentum
        self.velocity = [np.zeros_like(p.value) for p in params]

    def step(self, grads):
        for p, g, v in zip(self.params, grads, self.velocity):
            g = g + self.weight_decay * p.value
            v *= self.momentum
            v += g
            p.value = (p.value - self.lr * v).astype(np.float32)


class Adam:
    def __init__(self, params, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g + self.weight_decay * p.value
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value = (p.value - step).astype(np.float32)


@dataclasses.dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float
    val_loss: float


@dataclasses.dataclass
class TrainResult:
    model: object
    history: List[EpochRecord]
    best_epoch: int

    @property
    def losses(self):
        return [r.loss for r in self.history]


def _mask(graph, mask):
    if isinstance(mask, str):
        mask = {"train": graph.train_mask, "val": graph.val_mask, "test": graph.test_mask}[mask]
    return np.asarray(mask, dtype=bool)


def accuracy(logits, labels, mask):
    """Share of masked rows whose argmax equals the label (ties go to the lower class)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("cannot evaluate on an empty mask")
    pred = np.argmax(np.asarray(logits)[mask], axis=1)
    return float(np.mean(pred == np.asarray(labels)[mask]))


def evaluate(model, graph, mask="test", hooks=()):
    logits = model.predict_logits(graph, hooks=hooks)
    return accuracy(logits, graph.labels, _mask(graph, mask))


def _make_optimizer(params, config):
    if config.optimizer == "adam":
        return Adam(params, config.lr, config.weight_decay, config.betas, config.eps)
    return SGD(params, config.lr, config.weight_decay, config.momentum)


def train(model, graph, config=None, calibrate_after=True):
    """Fit ``model`` on the training mask; the best-validation weights win.

    Robust trimming is disabled while fitting.  Calibration of per-layer
    statistics runs afterwards on the clean graph.
    """
    config = config or TrainConfig()
    train_mask = _mask(graph, "train")
    if not train_mask.any():
        raise ConfigurationError("graph has no training entries")
    val_mask = _mask(graph, "val")
    train_idx = np.flatnonzero(train_mask)
    rng = np.random.default_rng(config.seed)
    names = list(model.params)
    params = [model.params[k] for k in names]
    opt = _make_optimizer(params, config)
    history = []
    best_score, best_epoch, best_state = (-math.inf, -math.inf), 0, None
    stale = 0
    model.fitting = True
    try:
        for epoch in range(1, config.epochs + 1):
            logits = model.forward(graph, training=True, rng=rng)
            loss = ad.cross_entropy(logits, graph.labels, train_idx)
            loss_value = float(loss.value)
            if not np.isfinite(loss_value):
                raise TrainingError(f"loss became {loss_value}", epoch)
            grads = ad.backward(loss, params)
            opt.step([grads[p] for p in params])
            apply_masks(model)
            eval_logits = model.predict_logits(graph)
            train_acc = accuracy(eval_logits, graph.labels, train_mask)
            sel = val_mask if val_mask.any() else train_mask
            val_acc = accuracy(eval_logits, graph.labels, sel)
            with ad.no_grad():
                val_loss = float(ad.cross_entropy(ad.Tensor(eval_logits), graph.labels,
                                                  np.flatnonzero(sel)).value)
            history.append(EpochRecord(epoch, loss_value, train_acc, val_acc, val_loss))
            # accuracy first, validation loss breaks ties
            score = (val_acc, -val_loss if np.isfinite(val_loss) else -math.inf)
            if score > best_score:
                best_score, best_epoch, stale = score, epoch, 0
                best_state = {k: model.params[k].value.copy() for k in names}
            else:
                stale += 1
                if config.patience is not None and stale >= config.patience:
                    break
    finally:
        model.fitting = False
    if best_state is not None:
        model.load_state(best_state)
    if calibrate_after:
        calibrate(model, graph)
    return TrainResult(model, history, best_epoch)


def calibrate(model, graph, mask=None):
    """Record clean per-(layer, dim) statistics of every layer's input.

    Node tasks use every node; graph tasks use the nodes of training graphs.
    """
    if graph.task == "graph":
        train = _mask(graph, "train") if mask is None else _mask(graph, mask)
        nodes = train[graph.graph_ids]
    else:
        nodes = np.ones(graph.num_nodes, dtype=bool) if mask is None else _mask(graph, mask)
    if not nodes.any():
        raise ConfigurationError("calibration needs a non-empty set of training nodes")
    trace = ForwardTrace()
    was_fitting = model.fitting
    model.fitting = True
    try:
        model.predict_logits(graph, trace=trace)
    finally:
        model.fitting = was_fitting
    model.stats = StatsTable.from_layer_inputs([h[nodes] for h in trace.layer_inputs])
    return model.stats
