"""Predictive latent-dynamics model for driving frames, built on a small numpy autograd engine."""
import os

if os.environ.get("CARNET_THREADS"):
    # must run before numpy loads its BLAS
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["CARNET_THREADS"])

from .tensor import Tensor, ShapeError, TapeError, backward, no_grad
from .model import CARNet, CarnetConfig, Controller, RolloutOutput, WindowBatch

__all__ = ["Tensor", "ShapeError", "TapeError", "backward", "no_grad",
           "CARNet", "CarnetConfig", "Controller", "RolloutOutput", "WindowBatch"]
__version__ = "0.1.0"
