"""User-facing differentiation entry points.

``f`` always receives a list of scalars (floats, Duals, HyperDuals or tape
variables) and returns a scalar built from them with ordinary arithmetic and
the functions in :mod:`nlmevem.autodiff.ops`.
"""

import numpy as np

from ..errors import NonFiniteError, UnsupportedOpError
from .base import ADValue, primal
from .dual import Dual
from .hyperdual import HyperDual
from .tape import Tape


def _as_floats(x):
    return [float(v) for v in np.asarray(x, dtype=float).ravel()]


def _seed_chunk(xs, start, stop):
    k = stop - start
    out = []
    for i, v in enumerate(xs):
        t = np.zeros(k)
        if start <= i < stop:
            t[i - start] = 1.0
        out.append(Dual(v, t))
    return out


def _tangent(y, k):
    if type(y) is Dual:
        return np.asarray(y.tangent, dtype=float).reshape(k)
    if isinstance(y, ADValue):
        raise UnsupportedOpError(f"unexpected {type(y).__name__} output in forward mode")
    return np.zeros(k)


def value_and_grad_forward(f, x, chunk=8):
    """Value and gradient by ``ceil(n / chunk)`` forward passes."""
    xs = _as_floats(x)
    n = len(xs)
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    grad = np.zeros(n)
    value = None
    for c, start in enumerate(range(0, max(n, 1), chunk)):
        stop = min(start + chunk, n)
        try:
            with np.errstate(over="raise", divide="raise", invalid="raise", under="ignore"):
                y = f(_seed_chunk(xs, start, stop))
        except (FloatingPointError, ZeroDivisionError, OverflowError) as exc:
            raise NonFiniteError(f"non-finite intermediate in chunk {c}: {exc}", chunk=c) from exc
        g = _tangent(y, stop - start)
        v = float(primal(y))
        if not (np.isfinite(v) and np.all(np.isfinite(g))):
            raise NonFiniteError(f"non-finite result in chunk {c}", chunk=c)
        grad[start:stop] = g
        value = v
    return value, grad


def grad_forward(f, x, chunk=8):
    """Gradient of scalar ``f`` at ``x`` by chunked forward mode."""
    return value_and_grad_forward(f, x, chunk)[1]


def value_and_grad_reverse(f, x, tape=None):
    """Value and gradient from one recorded pass and one reverse sweep."""
    tape = Tape() if tape is None else tape
    tape.clear()
    leaves = [tape.variable(v) for v in _as_floats(x)]
    y = f(leaves)
    if not isinstance(y, ADValue) or type(y).__name__ != "Var":
        # output does not depend on the inputs
        return float(y), np.zeros(len(leaves))
    adj = tape.backward(y)
    g = np.array([0.0 if leaf.index >= len(adj) or adj[leaf.index] is None else float(adj[leaf.index])
                  for leaf in leaves])
    return float(y.value), g


def grad_reverse(f, x, tape=None):
    """Gradient of scalar ``f`` at ``x`` by reverse mode."""
    return value_and_grad_reverse(f, x, tape)[1]


def _hessian_for(f, xs, chunk):
    n = len(xs)
    H = np.zeros((n, n))
    tape = Tape()
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        tape.clear()
        leaves = [tape.variable(v) for v in _seed_chunk(xs, start, stop)]
        y = f(leaves)
        if type(y).__name__ != "Var":
            continue
        adj = tape.backward(y)
        for i, leaf in enumerate(leaves):
            a = adj[leaf.index] if leaf.index < len(adj) else None
            if type(a) is Dual:
                H[i, start:stop] = np.asarray(a.tangent).reshape(stop - start)
    return H


def _hessian_ff(f, xs):
    y = f(HyperDual.seed(xs))
    n = len(xs)
    if type(y) is not HyperDual:
        return np.zeros((n, n))
    return np.asarray(y.hess, dtype=float).reshape(n, n)


def hessian(f, x, method="forward-over-reverse", chunk=8):
    """Symmetrised Hessian of scalar ``f`` at ``x``.

    ``method`` is ``"forward-over-reverse"`` (default) or
    ``"forward-over-forward"`` for models without reverse-mode support.
    """
    xs = _as_floats(x)
    if method == "forward-over-reverse":
        H = _hessian_for(f, xs, chunk)
    elif method == "forward-over-forward":
        H = _hessian_ff(f, xs)
    else:
        raise ValueError(f"unknown hessian method {method!r}")
    return 0.5 * (H + H.T)
