"""Recurrent emotion classifiers adapted across domains by matching a donor
network's class centroids."""

__version__ = "0.1.0"

from .clustering import CentroidSet, PointSet, kmeans_fit, label_clusters
from .data import DatasetSplit, SequenceSample, SyntheticSpec, generate
from .errors import (
    CentroidAdaptError,
    ConfigError,
    EvaluationError,
    LabelingError,
    NumericalError,
    ParseError,
    ShapeError,
)
from .losses import LossConfig, combined_loss, loss_total, predict
from .nn import ArchSpec, NetworkState, backward, forward, init_network
from .training import TrainConfig, build_centroids, lambda_sweep, train_netb, train_neta

__all__ = [
    "ArchSpec",
    "CentroidAdaptError",
    "CentroidSet",
    "ConfigError",
    "DatasetSplit",
    "EvaluationError",
    "LabelingError",
    "LossConfig",
    "NetworkState",
    "NumericalError",
    "ParseError",
    "PointSet",
    "SequenceSample",
    "ShapeError",
    "SyntheticSpec",
    "TrainConfig",
    "backward",
    "build_centroids",
    "combined_loss",
    "forward",
    "generate",
    "init_network",
    "kmeans_fit",
    "label_clusters",
    "lambda_sweep",
    "loss_total",
    "predict",
    "train_netb",
    "train_neta",
]
