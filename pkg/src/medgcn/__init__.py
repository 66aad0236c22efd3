"""Heterogeneous graph convolution over medical entity graphs.

Two coupled prediction tasks share one graph-convolutional trunk:
multi-label medication recommendation and lab-value imputation, trained
jointly with a weighted combined loss on a small built-in reverse-mode
autodiff engine.
"""

from .errors import MedGcnError
from .graph import (
    IMPUTATION_TASK,
    MEDICATION_TASK,
    MedGraph,
    NodeType,
    SplitPlan,
    build_graph,
    graph_stats,
    load_graph,
    make_split,
    save_graph,
)
from .model import (
    Hyper,
    MedGcnModel,
    forward,
    inductive_embed,
    init_model,
    load_model,
    save_model,
)
from .synthetic import SyntheticSpec, generate_synthetic
from .training import TrainConfig, TrainReport, evaluate_split, train

__version__ = "0.1.0"

__all__ = [
    "IMPUTATION_TASK",
    "MEDICATION_TASK",
    "Hyper",
    "MedGcnError",
    "MedGcnModel",
    "MedGraph",
    "NodeType",
    "SplitPlan",
    "SyntheticSpec",
    "TrainConfig",
    "TrainReport",
    "__version__",
    "build_graph",
    "evaluate_split",
    "forward",
    "generate_synthetic",
    "graph_stats",
    "inductive_embed",
    "init_model",
    "load_graph",
    "load_model",
    "make_split",
    "save_graph",
    "save_model",
    "train",
]
