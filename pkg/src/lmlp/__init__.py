"""Lifelong machine-learning potentials.

High-dimensional neural network potentials on element-embracing
atom-centered symmetry functions, trained with the CoRe optimizer and
lifelong adaptive data selection, with ensemble uncertainties.
"""

__version__ = "0.1.0"

from .descriptors import DescriptorSpec, compute_block
from .elements import element_descriptors
from .ensemble import EnsembleModel, load_manifest, predict_with_uncertainty
from .optimizer import CoreConfig, CoreOptimizer, preset
from .potential import loss, loss_weight_gradient, predict
from .selection import SelectionConfig, SelectionState
from .storage import load_checkpoint, load_config, parse_dataset, save_checkpoint
from .structure import Conformation
from .trainer import TrainConfig, TrainingRun, TrainPlan, resume, train

__all__ = [
    "Conformation", "CoreConfig", "CoreOptimizer", "DescriptorSpec", "EnsembleModel",
    "SelectionConfig", "SelectionState", "TrainConfig", "TrainPlan", "TrainingRun",
    "compute_block", "element_descriptors", "load_checkpoint", "load_config",
    "load_manifest", "loss", "loss_weight_gradient", "parse_dataset", "predict",
    "predict_with_uncertainty", "preset", "resume", "save_checkpoint", "train",
]
