"""Bayesian nonparametric functional factor model with deep-kernel dynamics."""
from .autodiff import CholeskyError, ShapeError, Tape, backward
from .data import FunctionalPanel, SimConfig, load_panel, simulate_panel, write_panel
from .model import Df2mModel, InducingGrid, InducingPosterior, load_checkpoint, save_checkpoint
from .trainer import DivergenceError, ElboTrace, TrainConfig, elbo_estimate, fit, init_model

__version__ = "0.1.0"
__all__ = [
    "CholeskyError", "ShapeError", "Tape", "backward", "FunctionalPanel", "SimConfig",
    "load_panel", "simulate_panel", "write_panel", "Df2mModel", "InducingGrid",
    "InducingPosterior", "load_checkpoint", "save_checkpoint", "DivergenceError", "ElboTrace",
    "TrainConfig", "elbo_estimate", "fit", "init_model",
]
