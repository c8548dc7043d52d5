"""Gradient-based meta-learning with outer-loop task augmentation (MetaMix, Channel Shuffle)."""

from .augment import AugmentSpec, Strategy
from .config import ExperimentConfig
from .meta import MetaHyper, inner_adapt, meta_test, outer_step
from .model import MetaModel, ParamSet

__all__ = [
    "AugmentSpec",
    "ExperimentConfig",
    "MetaHyper",
    "MetaModel",
    "ParamSet",
    "Strategy",
    "inner_adapt",
    "meta_test",
    "outer_step",
]
