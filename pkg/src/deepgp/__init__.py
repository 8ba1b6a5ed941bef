"""Deep Gaussian processes trained by doubly stochastic variational inference."""

from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .data import Dataset, load_csv
from .layers import BayesianDenseLayer, GaussianLikelihood, GPLayer, LatentVariableLayer
from .model import DGPModel, build_model, elbo, evaluate, predict
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "BayesianDenseLayer",
    "DGPModel",
    "Dataset",
    "GPLayer",
    "GaussianLikelihood",
    "LatentVariableLayer",
    "TrainConfig",
    "build_model",
    "elbo",
    "evaluate",
    "fit",
    "load_checkpoint",
    "load_csv",
    "predict",
    "read_checkpoint",
    "save_checkpoint",
]
