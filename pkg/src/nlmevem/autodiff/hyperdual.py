"""Second-order forward mode (forward-over-forward) for Hessians.

A ``HyperDual`` carries the value, a gradient block ``(k,) + S`` and a
Hessian block ``(k, k) + S`` with respect to ``k`` seeded inputs.  It covers
the elementwise primitive set plus ``where``/``stack``/indexing; models that
need matrix products should use forward-over-reverse instead.
"""

import numpy as np

from ..errors import UnsupportedOpError
from .base import ADValue, primal


def _fitg(g, shape):
    if g.shape[1:] == shape:
        return g
    extra = len(shape) - (g.ndim - 1)
    if extra > 0:
        g = g.reshape(g.shape[:1] + (1,) * extra + g.shape[1:])
    return np.broadcast_to(g, g.shape[:1] + shape)


def _fith(h, shape):
    if h.shape[2:] == shape:
        return h
    extra = len(shape) - (h.ndim - 2)
    if extra > 0:
        h = h.reshape(h.shape[:2] + (1,) * extra + h.shape[2:])
    return np.broadcast_to(h, h.shape[:2] + shape)


def _outer(ga, gb):
    return ga[:, None] * gb[None, :]


def _logistic(x):
    return np.exp(-np.logaddexp(0.0, -x))


def _lift(x, like):
    if type(x) is HyperDual:
        return x
    if isinstance(x, ADValue):
        raise UnsupportedOpError(f"cannot mix HyperDual with {type(x).__name__}")
    k = like.grad.shape[0]
    s = np.shape(x)
    return HyperDual(x, np.zeros((k,) + s), np.zeros((k, k) + s))


class HyperDual(ADValue):
    __slots__ = ("value", "grad", "hess")
    _rank = 2

    def __init__(self, value, grad, hess):
        self.value = value
        self.grad = grad
        self.hess = hess

    @classmethod
    def seed(cls, values):
        """Independent variables ``values[i]`` seeded along direction ``i``."""
        values = [np.asarray(v, dtype=float) for v in values]
        k = len(values)
        out = []
        for i, v in enumerate(values):
            g = np.zeros((k,) + v.shape)
            g[i] = 1.0
            out.append(cls(v if v.ndim else float(v), g, np.zeros((k, k) + v.shape)))
        return out

    @property
    def shape(self):
        return np.shape(self.value)

    def _chain(self, v, d1, d2):
        return HyperDual(v, d1 * self.grad, d1 * self.hess + d2 * _outer(self.grad, self.grad))

    def __add__(self, o):
        if isinstance(o, ADValue) and type(o) is not HyperDual:
            return NotImplemented
        o = _lift(o, self)
        v = self.value + o.value
        s = np.shape(v)
        return HyperDual(v, _fitg(self.grad, s) + _fitg(o.grad, s), _fith(self.hess, s) + _fith(o.hess, s))

    __radd__ = __add__

    def __neg__(self):
        return HyperDual(-self.value, -self.grad, -self.hess)

    def __sub__(self, o):
        if isinstance(o, ADValue) and type(o) is not HyperDual:
            return NotImplemented
        return self + (-_lift(o, self))

    def __rsub__(self, o):
        return _lift(o, self) - self

    def __mul__(self, o):
        if isinstance(o, ADValue) and type(o) is not HyperDual:
            return NotImplemented
        if type(o) is not HyperDual:
            v = self.value * o
            s = np.shape(v)
            return HyperDual(v, _fitg(self.grad, s) * o, _fith(self.hess, s) * o)
        v = self.value * o.value
        s = np.shape(v)
        ga, gb = _fitg(self.grad, s), _fitg(o.grad, s)
        h = _fith(self.hess, s) * o.value + self.value * _fith(o.hess, s) + _outer(ga, gb) + _outer(gb, ga)
        return HyperDual(v, ga * o.value + self.value * gb, h)

    __rmul__ = __mul__

    def reciprocal(self):
        x = self.value
        return self._chain(1.0 / x, -1.0 / (x * x), 2.0 / (x * x * x))

    def __truediv__(self, o):
        if isinstance(o, ADValue) and type(o) is not HyperDual:
            return NotImplemented
        if type(o) is not HyperDual:
            return self * (1.0 / o)
        return self * o.reciprocal()

    def __rtruediv__(self, o):
        return self.reciprocal() * o

    def __pow__(self, o):
        if type(o) is HyperDual:
            return (o * self.log()).exp()
        if isinstance(o, ADValue):
            return NotImplemented
        x = self.value
        return self._chain(x**o, o * x ** (o - 1), o * (o - 1) * x ** (o - 2))

    def __rpow__(self, o):
        return (self * np.log(o)).exp()

    def __matmul__(self, o):
        raise UnsupportedOpError("matmul is not available in forward-over-forward mode")

    __rmatmul__ = __matmul__

    def __lt__(self, o):
        return self.value < primal(o)

    def __le__(self, o):
        return self.value <= primal(o)

    def __gt__(self, o):
        return self.value > primal(o)

    def __ge__(self, o):
        return self.value >= primal(o)

    def __getitem__(self, key):
        if not isinstance(key, tuple):
            key = (key,)
        return HyperDual(self.value[key], self.grad[(slice(None),) + key], self.hess[(slice(None),) * 2 + key])

    def exp(self):
        v = np.exp(self.value)
        return self._chain(v, v, v)

    def log(self):
        x = self.value
        return self._chain(np.log(x), 1.0 / x, -1.0 / (x * x))

    def sqrt(self):
        v = np.sqrt(self.value)
        return self._chain(v, 0.5 / v, -0.25 / (v * self.value))

    def sin(self):
        s, c = np.sin(self.value), np.cos(self.value)
        return self._chain(s, c, -s)

    def cos(self):
        s, c = np.sin(self.value), np.cos(self.value)
        return self._chain(c, -s, -c)

    def tanh(self):
        v = np.tanh(self.value)
        d = 1.0 - v * v
        return self._chain(v, d, -2.0 * v * d)

    def logistic(self):
        v = _logistic(self.value)
        d = v * (1.0 - v)
        return self._chain(v, d, d * (1.0 - 2.0 * v))

    def softplus(self):
        s = _logistic(self.value)
        return self._chain(np.logaddexp(0.0, self.value), s, s * (1.0 - s))

    def __abs__(self):
        return self._chain(np.abs(self.value), np.sign(self.value), 0.0)

    abs = __abs__

    @staticmethod
    def where(mask, a, b):
        like = a if type(a) is HyperDual else b
        a, b = _lift(a, like), _lift(b, like)
        v = np.where(mask, a.value, b.value)
        s = np.shape(v)
        return HyperDual(
            v,
            np.where(mask, _fitg(a.grad, s), _fitg(b.grad, s)),
            np.where(mask, _fith(a.hess, s), _fith(b.hess, s)),
        )

    @staticmethod
    def stack(items):
        like = next(x for x in items if type(x) is HyperDual)
        items = [_lift(x, like) for x in items]
        vals = np.broadcast_arrays(*[x.value for x in items])
        s = vals[0].shape
        return HyperDual(
            np.stack(vals),
            np.stack([_fitg(x.grad, s) for x in items], axis=1),
            np.stack([_fith(x.hess, s) for x in items], axis=2),
        )
