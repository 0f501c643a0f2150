"""Forward- and reverse-mode automatic differentiation."""

from . import ops
from .api import grad_forward, grad_reverse, hessian, value_and_grad_forward, value_and_grad_reverse
from .base import ADValue, primal
from .dual import Dual
from .hyperdual import HyperDual
from .tape import Tape, Var, current_tape, register_primitive

__all__ = [
    "ADValue",
    "Dual",
    "HyperDual",
    "Tape",
    "Var",
    "current_tape",
    "grad_forward",
    "grad_reverse",
    "hessian",
    "ops",
    "primal",
    "register_primitive",
    "value_and_grad_forward",
    "value_and_grad_reverse",
]
