"""Hierarchical Koopman distillation of a diffusion teacher into a one-step generator."""

from .config import RunConfig
from .koopman import KoopmanLevelOp, LatentPyramid, SpectralBand, block_exp, evolve
from .netarch import HKDModel
from .trainer import hkd_forward, one_step_sample, train

__version__ = "0.1.0"

__all__ = ["HKDModel", "KoopmanLevelOp", "LatentPyramid", "RunConfig", "SpectralBand",
           "block_exp", "evolve", "hkd_forward", "one_step_sample", "train"]
