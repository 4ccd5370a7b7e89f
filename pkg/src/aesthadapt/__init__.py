"""Personalized image-aesthetics scoring with per-user residual adapters."""

from .data import RatingRecord, load_manifest, synth_generate
from .enhance import EnhanceConfig, enhance
from .evaluation import EvalReport, aggregate, spearman
from .model import AdapterConfig, AestheticsNet, BackboneConfig, Placement, TrainMode, UserProfile, attach_adapters, build_backbone
from .numerics import NumericalError, RandomSource, ShapeError, Tensor
from .persistence import Checkpoint, load_checkpoint, save_checkpoint
from .train import adapt_user, train_generic

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "AestheticsNet",
    "BackboneConfig",
    "Checkpoint",
    "EnhanceConfig",
    "EvalReport",
    "NumericalError",
    "Placement",
    "RandomSource",
    "RatingRecord",
    "ShapeError",
    "Tensor",
    "TrainMode",
    "UserProfile",
    "adapt_user",
    "aggregate",
    "attach_adapters",
    "build_backbone",
    "enhance",
    "load_checkpoint",
    "load_manifest",
    "save_checkpoint",
    "spearman",
    "synth_generate",
    "train_generic",
]
