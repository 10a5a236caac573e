"""Temporal knowledge graph extrapolation with multi-span evolution and
cross-time disentanglement."""

from .config import PRESETS, TrainConfig, resolve_config
from .data import TkgDataset, gen_synthetic_tkg, load_dataset
from .evaluation import MetricsReport, evaluate_split
from .params import Ablation, ModelState
from .training import fit, new_train_state

__all__ = [
    "PRESETS",
    "Ablation",
    "MetricsReport",
    "ModelState",
    "TkgDataset",
    "TrainConfig",
    "evaluate_split",
    "fit",
    "gen_synthetic_tkg",
    "load_dataset",
    "new_train_state",
    "resolve_config",
]

__version__ = "0.1.0"
