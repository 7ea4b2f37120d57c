"""Dense float64 arrays with reverse-mode autodiff and an Adam optimizer."""
from . import tensor as ops
from .autodiff import evaluate_and_backprop, grad_check, value_of
from .optim import AdamState, adam_step
from .tensor import NonFiniteError, NumcoreError, ShapeError, Tape, Tensor, as_tensor

__all__ = [
    "ops", "Tensor", "Tape", "as_tensor", "evaluate_and_backprop", "grad_check",
    "value_of", "AdamState", "adam_step", "NumcoreError", "ShapeError", "NonFiniteError",
]
