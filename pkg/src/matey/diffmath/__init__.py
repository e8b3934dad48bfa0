"""Small reverse-mode autodiff layer used by every learnable component."""

from . import ops
from .gradcheck import GradCheckReport, NonFiniteError, grad_check, rel_error
from .init import trunc_normal
from .tensor import DTYPES, Parameter, ShapeError, Tensor, as_tensor, no_grad, zero_grads

__all__ = [
    "DTYPES",
    "GradCheckReport",
    "NonFiniteError",
    "Parameter",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "grad_check",
    "no_grad",
    "ops",
    "rel_error",
    "trunc_normal",
    "zero_grads",
]
