"""Unfolded iterative shrinkage-thresholding network for image super-resolution.

A small self-contained stack: array kernels (:mod:`istar.tensor`), reverse
mode autodiff (:mod:`istar.autodiff`), an exact ISTA solver
(:mod:`istar.ista`), the network (:mod:`istar.model`), data and metrics,
training and the ``istar`` command line.
"""
from .ista import IstaProblem, IstaSolverConfig, solve
from .model import IstarModel, ModelConfig
from .train import TrainConfig, evaluate, train

__all__ = ["IstaProblem", "IstaSolverConfig", "solve", "IstarModel", "ModelConfig",
           "TrainConfig", "evaluate", "train"]
__version__ = "0.1.0"
