"""Unpaired image translation with global style-code alignment and local attention-weighted content alignment."""

from .config import ConfigError, RunConfig, load_config
from .data import DomainDataset, ImageSample, SyntheticSpec, generate_synthetic, load_folder
from .style_encoder import StyleCode, StyleEncoder
from .trainer import Checkpoint, fit, infer, load_checkpoint, save_checkpoint, train_step

__all__ = [
    "Checkpoint",
    "ConfigError",
    "DomainDataset",
    "ImageSample",
    "RunConfig",
    "StyleCode",
    "StyleEncoder",
    "SyntheticSpec",
    "fit",
    "generate_synthetic",
    "infer",
    "load_checkpoint",
    "load_config",
    "load_folder",
    "save_checkpoint",
    "train_step",
]
