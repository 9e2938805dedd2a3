"""Multimodal claim verification with relational fusion and a contrastive head."""

from .data import LABEL_NAMES, Sample, SyntheticSpec, VeracityLabel, generate_synthetic, load_dataset
from .model import ModelConfig, MultiCheckModel
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "LABEL_NAMES",
    "ModelConfig",
    "MultiCheckModel",
    "Sample",
    "SyntheticSpec",
    "TrainConfig",
    "VeracityLabel",
    "generate_synthetic",
    "load_dataset",
    "train",
]
