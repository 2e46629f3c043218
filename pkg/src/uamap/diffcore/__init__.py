"""Reverse-mode automatic differentiation on dense numpy arrays."""

from .array import DiffArray, Tape, active_tape, as_diff, record_op
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .nn import MLP, Linear, Module, parameter
from .optim import Adam, clip_grad_norm, cosine_lr
from . import ops

__all__ = [
    "DiffArray", "Tape", "active_tape", "as_diff", "record_op",
    "load_checkpoint", "save_checkpoint", "grad_check",
    "MLP", "Linear", "Module", "parameter", "Adam", "clip_grad_norm",
    "cosine_lr", "ops",
]
