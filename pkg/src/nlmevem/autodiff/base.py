"""Common base for differentiable scalar types.

Every differentiable value in the package is "lane vectorised": its primal is
either a Python/numpy scalar or a numpy array whose trailing axis enumerates
independent evaluation lanes (Monte Carlo draws, subjects, quadrature nodes).
Arithmetic is elementwise across lanes, so a lane never observes another
lane's values and batched results equal one-lane results bit for bit.
"""

import numpy as np


class ADValue:
    """Marker base class. ``_rank`` orders types when operands are mixed."""

    __slots__ = ()
    __array_ufunc__ = None  # make ndarray defer to our reflected operators
    _rank = 0


def primal(x):
    """Strip all derivative information and return the plain value."""
    while isinstance(x, ADValue):
        x = x.value
    return x


def shape_of(x):
    return getattr(x, "shape", ())


def dominant(*args):
    """Return the highest-ranked AD class among ``args`` (or None)."""
    best = None
    for a in args:
        if isinstance(a, ADValue):
            if best is None or a._rank > best._rank:
                best = type(a)
    return best


def sum_to(g, shape):
    """Reduce a broadcast gradient ``g`` back down to ``shape``."""
    gshape = shape_of(g)
    if gshape == shape:
        return g
    extra = len(gshape) - len(shape)
    axes = tuple(range(extra))
    axes += tuple(
        extra + i for i, s in enumerate(shape) if s == 1 and gshape[extra + i] != 1
    )
    if axes:
        g = g.sum(axis=axes)
        if shape_of(g) != shape:
            g = g.reshape(shape)
    return g


def is_zero(x):
    """True for structural float zeros that let callers skip an operation."""
    return type(x) is float and x == 0.0


LOG_2PI = float(np.log(2.0 * np.pi))
