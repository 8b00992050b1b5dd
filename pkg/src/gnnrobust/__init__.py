"""Bit-flip fault injection and robust neighborhood aggregation for GNNs."""
from .aggregators import AggregatorConfig, StatsTable
from .estimator import GNNClassifier
from .exceptions import (ConfigurationError, ContractError, GNNRobustError, GraphValidationError,
                         ParseError, ShapeError, TrainingError)
from .faults import BitFlipInjector, EmbeddingInjector, FaultSpec, inject_adjacency, inject_matrix
from .graph import Graph, load_graph, save_graph, synth_planted_partition
from .models import GNN, load_checkpoint, magnitude_prune, save_checkpoint
from .trainer import TrainConfig, calibrate, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AggregatorConfig", "StatsTable", "GNNClassifier", "ConfigurationError", "ContractError",
    "GNNRobustError", "GraphValidationError", "ParseError", "ShapeError", "TrainingError",
    "BitFlipInjector", "EmbeddingInjector", "FaultSpec", "inject_adjacency", "inject_matrix",
    "Graph", "load_graph", "save_graph", "synth_planted_partition", "GNN", "load_checkpoint",
    "magnitude_prune", "save_checkpoint", "TrainConfig", "calibrate", "evaluate", "train",
]
