"""Multi-view spatial-temporal graph convolution for sleep staging.

The package is layered bottom-up: ``tensor`` (reverse-mode autodiff on
numpy), ``graph`` (adjacencies, Laplacians, Chebyshev stacks), ``features``
(per-channel CNN), ``stgcn`` (attention and graph convolution blocks plus the
two-view model), ``domain`` (gradient reversal and losses), ``training`` and
``metrics``, ``data`` (container, windows, synthetic recordings) and ``cli``.
"""
from .config import TrainConfig, format_config, load_config
from .data import (STAGES, Dataset, SyntheticSpec, build_windows, builtin_layout, generate_synthetic,
                   load_dataset, load_electrode_layout, save_dataset, window_sequence)
from .domain import GrlConfig, linear_probe_accuracy, total_loss
from .features import FeatureNet, FeatureNetConfig, extract_features
from .graph import (AdjacencyMatrix, ElectrodeLayout, baseline_adjacency, build_dc_adjacency, cheb_stack,
                    graph_learning_loss, learn_fc_adjacency, scaled_laplacian)
from .metrics import Metrics, compute_metrics, metrics_from_confusion
from .stgcn import MSTGCN, ModelConfig, mstgcn_forward
from .tensor import Tape, Tensor, grad_check
from .training import compare_adjacency, cross_validate, evaluate, fold_splits, train

__version__ = "0.1.0"

__all__ = [
    "STAGES", "AdjacencyMatrix", "Dataset", "ElectrodeLayout", "FeatureNet", "FeatureNetConfig",
    "GrlConfig", "MSTGCN", "Metrics", "ModelConfig", "SyntheticSpec", "Tape", "Tensor", "TrainConfig",
    "baseline_adjacency", "build_dc_adjacency", "build_windows", "builtin_layout", "cheb_stack",
    "compare_adjacency", "compute_metrics", "cross_validate", "evaluate", "extract_features",
    "fold_splits", "format_config", "generate_synthetic", "grad_check", "graph_learning_loss",
    "learn_fc_adjacency", "linear_probe_accuracy", "load_config", "load_dataset",
    "load_electrode_layout", "metrics_from_confusion", "mstgcn_forward", "save_dataset",
    "scaled_laplacian", "total_loss", "train", "window_sequence",
]
