"""scikit-learn style front end: ``GNNClassifier`` and input validation."""
from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ContractError, ShapeError
from .graph import Graph
from .models import GNN
from .trainer import TrainConfig, accuracy, train


def check_graph(graph, n_features=None):
    """Reject anything that is not a :class:`Graph` of the expected width."""
    if not isinstance(graph, Graph):
        raise ContractError(f"expected a Graph, got {type(graph).__name__}")
    if n_features is not None and graph.num_features != n_features:
        raise ShapeError(f"graph has {graph.num_features} features, estimator was fit on {n_features}")
    return graph


def check_mask(graph, mask):
    if isinstance(mask, str):
        try:
            mask = {"train": graph.train_mask, "val": graph.val_mask, "test": graph.test_mask}[mask]
        except KeyError:
            raise ContractError(f"unknown mask name {mask!r}") from None
    mask = np.asarray(mask, dtype=bool)
    size = graph.num_graphs if graph.task == "graph" else graph.num_nodes
    if mask.shape != (size,):
        raise ShapeError(f"mask has shape {mask.shape}, expected ({size},)")
    return mask


class GNNClassifier(ClassifierMixin, BaseEstimator):
    """Node or graph classifier; ``X`` is a :class:`Graph` carrying its own labels and masks."""

    def __init__(self, arch="gcn", hidden=64, n_layers=2, aggregator="mean", dropout=0.5,
                 epochs=200, lr=0.01, weight_decay=5e-4, optimizer="adam", patience=100, seed=0):
        self.arch = arch
        self.hidden = hidden
        self.n_layers = n_layers
        self.aggregator = aggregator
        self.dropout = dropout
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.optimizer = optimizer
        self.patience = patience
        self.seed = seed

    def fit(self, X, y=None):
        graph = check_graph(X)
        if y is not None:
            y = np.asarray(y)
            if y.shape != graph.labels.shape:
                raise ShapeError(f"y has shape {y.shape}, graph labels have {graph.labels.shape}")
            graph = dataclasses.replace(graph, labels=y)
        model = GNN(self.arch, graph.num_features, self.hidden, graph.num_classes,
                    n_layers=self.n_layers, aggregator=self.aggregator, dropout=self.dropout,
                    task=graph.task, seed=self.seed)
        cfg = TrainConfig(epochs=self.epochs, lr=self.lr, weight_decay=self.weight_decay,
                          optimizer=self.optimizer, seed=self.seed, patience=self.patience)
        result = train(model, graph, cfg)
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.arange(graph.num_classes)
        self.n_features_in_ = graph.num_features
        return self

    @classmethod
    def from_model(cls, model):
        """Wrap an already trained :class:`GNN` (e.g. a loaded checkpoint)."""
        est = cls(arch=model.arch, hidden=model.hidden, n_layers=model.n_layers,
                  aggregator=model.aggregator.to_string(), dropout=model.dropout, seed=model.seed)
        est.model_ = model
        est.history_ = []
        est.best_epoch_ = None
        est.classes_ = np.arange(model.num_classes)
        est.n_features_in_ = model.in_dim
        return est

    def decision_function(self, X, hooks=()):
        check_is_fitted(self, "model_")
        graph = check_graph(X, self.n_features_in_)
        return self.model_.predict_logits(graph, hooks=hooks)

    def predict_proba(self, X, hooks=()):
        z = self.decision_function(X, hooks).astype(np.float64)
        with np.errstate(all="ignore"):
            z = z - z.max(axis=1, keepdims=True)
            e = np.exp(z)
            return e / e.sum(axis=1, keepdims=True)

    def predict(self, X, hooks=()):
        return np.argmax(self.decision_function(X, hooks), axis=1)

    def score(self, X, y=None, mask="test", sample_weight=None):
        graph = check_graph(X, self.n_features_in_)
        labels = graph.labels if y is None else np.asarray(y)
        return accuracy(self.decision_function(graph), labels, check_mask(graph, mask))
