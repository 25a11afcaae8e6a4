"""Numeric core: tensors, reverse-mode autodiff, Adam, gradient checking."""

from .adam import AdamState, adam_step
from .gradcheck import GradCheckReport, grad_check, grad_check_params
from .rng import stream
from .tensor import Tape, Tensor, accumulate_grad, active_tape, backward
from . import ops

__all__ = [
    "AdamState",
    "GradCheckReport",
    "Tape",
    "Tensor",
    "accumulate_grad",
    "active_tape",
    "adam_step",
    "backward",
    "grad_check",
    "grad_check_params",
    "ops",
    "stream",
]
