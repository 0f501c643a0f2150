"""Math namespace that works uniformly on floats, arrays, Duals and tape vars.

Model, solver and objective code call these functions instead of ``numpy`` so
that the same source runs with plain reals, forward mode or reverse mode.
"""

import numpy as np

from .base import LOG_2PI, ADValue, dominant, primal


def _logistic(x):
    return np.exp(-np.logaddexp(0.0, -x))


def exp(x):
    return x.exp() if isinstance(x, ADValue) else np.exp(x)


def log(x):
    return x.log() if isinstance(x, ADValue) else np.log(x)


def sqrt(x):
    return x.sqrt() if isinstance(x, ADValue) else np.sqrt(x)


def sin(x):
    return x.sin() if isinstance(x, ADValue) else np.sin(x)


def cos(x):
    return x.cos() if isinstance(x, ADValue) else np.cos(x)


def tanh(x):
    return x.tanh() if isinstance(x, ADValue) else np.tanh(x)


def logistic(x):
    return x.logistic() if isinstance(x, ADValue) else _logistic(x)


def softplus(x):
    return x.softplus() if isinstance(x, ADValue) else np.logaddexp(0.0, x)


def absolute(x):
    return x.abs() if isinstance(x, ADValue) else np.abs(x)


def square(x):
    return x * x


def where(mask, a, b):
    """Lane-wise select with a constant boolean ``mask``."""
    cls = dominant(a, b)
    if cls is None:
        return np.where(mask, a, b)
    return cls.where(mask, a, b)


def maximum(a, b):
    """Subgradient convention: ties take the first argument."""
    return where(primal(a) >= primal(b), a, b)


def minimum(a, b):
    return where(primal(a) <= primal(b), a, b)


def stack(items):
    items = list(items)
    cls = dominant(*items)
    if cls is None:
        return np.stack(np.broadcast_arrays(*items))
    return cls.stack(items)


def matmul(a, b):
    return a @ b


def reshape(x, shape):
    return x.reshape(shape)


def total(x, axis=None):
    if isinstance(x, ADValue):
        return x.sum(axis=axis)
    return np.sum(x, axis=axis)


def add_n(items):
    """Sum a sequence left to right (deterministic order)."""
    it = iter(items)
    acc = next(it)
    for x in it:
        acc = acc + x
    return acc


def normal_logpdf(y, mean, sd):
    z = (y - mean) / sd
    return -0.5 * LOG_2PI - log(sd) - 0.5 * (z * z)


def std_normal_logpdf(z):
    return -0.5 * LOG_2PI - 0.5 * (z * z)
