"""
GZSL Lab
========
Generalized zero-shot learning with progressive semantic-visual mutual
adaption, built on a small reverse-mode tensor core.

Components:
    1. Tensor core with an explicit gradient tape
    2. Dual semantic-visual transformer modules (IMSE + SMID)
    3. Attribute head with classification, alignment and debiasing losses
    4. Toy patch-encoder backbone
    5. Synthetic benchmark generator with renderer-variant ambiguity
    6. Trainer, checkpoints and calibrated-stacking evaluator
    7. Brute-force oracle and finite-difference gradient checks
"""

__version__ = "1.0.0"
__author__ = "GZSL Lab"

from .config import RunConfig, settings
from .data_generator import DataGenerator, GzslDataset
from .model import GzslModel
from .presets import PRESETS, DatasetPreset

__all__ = [
    "RunConfig",
    "settings",
    "DataGenerator",
    "GzslDataset",
    "GzslModel",
    "PRESETS",
    "DatasetPreset",
]
