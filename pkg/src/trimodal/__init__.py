"""Tri-modal (point cloud, multi-view, text) alignment for cross-modal 3D retrieval."""

from .autodiff import Graph, Tensor, grad_check
from .data import DataConfig, load, make_batches, synthesize
from .encoders import EncoderConfig, ModelParams, init_params
from .loss import LossConfig, contrastive_loss, hn_weights
from .metrics import evaluate, evaluate_embeddings, ndcg_at_k, recall_rate_at_k
from .trainer import Model, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "DataConfig",
    "EncoderConfig",
    "Graph",
    "LossConfig",
    "Model",
    "ModelParams",
    "Tensor",
    "TrainConfig",
    "contrastive_loss",
    "evaluate",
    "evaluate_embeddings",
    "grad_check",
    "hn_weights",
    "init_params",
    "load",
    "load_checkpoint",
    "make_batches",
    "ndcg_at_k",
    "recall_rate_at_k",
    "save_checkpoint",
    "synthesize",
    "train",
]
