"""Desk-scale MEGAN space-time video super-resolution in numpy float64.

Every block carries a hand-written backward pass; the bilinear gather/scatter
kernels under deformable sampling run from a compiled extension when one is
built, with a numpy fallback otherwise (see ``megan.kernels.BACKEND``).
"""
from .kernels import BACKEND
from .model import MeganConfig, init_params, megan_forward, megan_backward, megan_infer
from .tensor import FormatError, MeganError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "FormatError", "MeganConfig", "MeganError", "ShapeError",
    "init_params", "megan_backward", "megan_forward", "megan_infer",
]
