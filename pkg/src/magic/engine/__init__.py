from .tensor import ShapeError, Tape, Tensor, backward, no_grad
from . import ops
from .kernels import BACKEND_NAME

__all__ = ["ShapeError", "Tape", "Tensor", "backward", "no_grad", "ops", "BACKEND_NAME"]
