"""
Gramformer Crowd Counting Package
Graph-modulated transformer for density-map crowd counting, trained on synthetic scenes
"""

__version__ = "1.0.0"
__author__ = "Crowd Counting Team"

from .config import ModelConfig, RunConfig, load_config
from .model import GramformerModel
from .graphs import build_attention_graph, build_centrality, edge_regularization, knn_neighbors
from .synthdata import SceneSpec, SceneSample, generate_scene, write_dataset, load_dataset
from .diagnostics import anvar, error_metrics
from .checkpoint import save_checkpoint, load_checkpoint
from .trainer import Trainer, evaluate, train_step

__all__ = [
    "ModelConfig",
    "RunConfig",
    "load_config",
    "GramformerModel",
    "build_attention_graph",
    "build_centrality",
    "edge_regularization",
    "knn_neighbors",
    "SceneSpec",
    "SceneSample",
    "generate_scene",
    "write_dataset",
    "load_dataset",
    "anvar",
    "error_metrics",
    "save_checkpoint",
    "load_checkpoint",
    "Trainer",
    "evaluate",
    "train_step",
]
