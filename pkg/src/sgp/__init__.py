"""Scaled gradient projection (SGP) for continual learning, in numpy.

Layer gradients are projected against a memory of input-space bases; each
basis carries an importance in [0, 1] that scales how much of the gradient
along it survives. Importance 1 everywhere gives gradient projection memory
(GPM).
"""

from .data import TaskDataset, TaskSequence, gen_permuted, gen_synthetic_split, load_idx, split_by_class
from .gpm import (
    BasisMemory,
    LayerMemory,
    ScaleConfig,
    compute_importance,
    project_gradient,
    update_memory_after_task,
)
from .net import Conv2d, Dense, Network
from .optim import OptimizerState
from .trainer import TrainConfig, compute_metrics, compute_relative_fwt, train_continual

__all__ = [
    "BasisMemory", "Conv2d", "Dense", "LayerMemory", "Network", "OptimizerState",
    "ScaleConfig", "TaskDataset", "TaskSequence", "TrainConfig", "compute_importance",
    "compute_metrics", "compute_relative_fwt", "gen_permuted", "gen_synthetic_split",
    "load_idx", "project_gradient", "split_by_class", "train_continual",
    "update_memory_after_task",
]
