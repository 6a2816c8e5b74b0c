"""Invertible recurrent inference machines with constant-memory training."""
from .engine import BackpropMode, backprop, backprop_invertible, backprop_stored, memory_report
from .forward_model import FourierOperator, SamplingMask, make_mask, simulate_measurement
from .layers import AffineCouplingLayer, CouplingLayer, ResidualBlock, build_orthogonal
from .losses import LossConfig
from .model import IRIMModel, irim_rollout, load_checkpoint, save_checkpoint
from .numerics import NumericalError

__version__ = "0.1.0"

__all__ = [
    "AffineCouplingLayer",
    "BackpropMode",
    "CouplingLayer",
    "FourierOperator",
    "IRIMModel",
    "LossConfig",
    "NumericalError",
    "ResidualBlock",
    "SamplingMask",
    "backprop",
    "backprop_invertible",
    "backprop_stored",
    "build_orthogonal",
    "irim_rollout",
    "load_checkpoint",
    "make_mask",
    "memory_report",
    "save_checkpoint",
    "simulate_measurement",
    "__version__",
]
