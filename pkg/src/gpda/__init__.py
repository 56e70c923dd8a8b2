"""Graph partial domain adaptation on a small numpy autodiff engine."""

from .autodiff import ContractError, NumericError, ShapeError, Tensor, backward
from .data import PdaTask, Shift, gen_synthetic_pda, load_idx, make_partial_target
from .graph import LabelGraph, NodeLabels, assign_pseudo_labels, build_adjacency
from .losses import CentroidBank, ClassWeights, estimate_gamma
from .models import GpdaModels, ModelSpec, init_params
from .training import MODES, TrainConfig, TrainingAborted, fit

__all__ = [
    "CentroidBank",
    "ClassWeights",
    "ContractError",
    "GpdaModels",
    "LabelGraph",
    "MODES",
    "ModelSpec",
    "NodeLabels",
    "NumericError",
    "PdaTask",
    "ShapeError",
    "Shift",
    "Tensor",
    "TrainConfig",
    "TrainingAborted",
    "assign_pseudo_labels",
    "backward",
    "build_adjacency",
    "estimate_gamma",
    "fit",
    "gen_synthetic_pda",
    "init_params",
    "load_idx",
    "make_partial_target",
]
