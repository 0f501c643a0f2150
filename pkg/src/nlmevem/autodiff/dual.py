"""Forward-mode dual numbers carrying a chunk of tangents.

``Dual(value, tangent)`` stores the primal ``value`` (scalar or lane array of
shape ``S``) and ``tangent`` of shape ``(k,) + S``: the directional
derivatives along ``k`` seeded input directions (the chunk).
"""

import numpy as np

from ..errors import UnsupportedOpError
from .base import ADValue, primal


def _fit(t, shape):
    """Broadcast a tangent block ``(k,) + s`` to ``(k,) + shape``."""
    if t.shape[1:] == shape:
        return t
    extra = len(shape) - (t.ndim - 1)
    if extra > 0:
        t = t.reshape(t.shape[:1] + (1,) * extra + t.shape[1:])
    return np.broadcast_to(t, t.shape[:1] + shape)


def _logistic(x):
    return np.exp(-np.logaddexp(0.0, -x))


class Dual(ADValue):
    __slots__ = ("value", "tangent")
    _rank = 1

    def __init__(self, value, tangent):
        self.value = value
        self.tangent = tangent

    def __repr__(self):
        return f"Dual({self.value!r}, {self.tangent!r})"

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    @property
    def nchunk(self):
        return self.tangent.shape[0]

    # -- arithmetic ---------------------------------------------------------
    def _unary(self, value, deriv):
        return Dual(value, deriv * self.tangent)

    def __add__(self, o):
        if type(o) is Dual:
            v = self.value + o.value
            s = np.shape(v)
            return Dual(v, _fit(self.tangent, s) + _fit(o.tangent, s))
        if isinstance(o, ADValue):
            return NotImplemented
        v = self.value + o
        return Dual(v, _fit(self.tangent, np.shape(v)))

    __radd__ = __add__

    def __sub__(self, o):
        if type(o) is Dual:
            v = self.value - o.value
            s = np.shape(v)
            return Dual(v, _fit(self.tangent, s) - _fit(o.tangent, s))
        if isinstance(o, ADValue):
            return NotImplemented
        v = self.value - o
        return Dual(v, _fit(self.tangent, np.shape(v)))

    def __rsub__(self, o):
        v = o - self.value
        return Dual(v, -_fit(self.tangent, np.shape(v)))

    def __neg__(self):
        return Dual(-self.value, -self.tangent)

    def __pos__(self):
        return self

    def __mul__(self, o):
        if type(o) is Dual:
            v = self.value * o.value
            s = np.shape(v)
            return Dual(v, _fit(self.tangent, s) * o.value + self.value * _fit(o.tangent, s))
        if isinstance(o, ADValue):
            return NotImplemented
        v = self.value * o
        return Dual(v, _fit(self.tangent, np.shape(v)) * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if type(o) is Dual:
            v = self.value / o.value
            s = np.shape(v)
            t = (_fit(self.tangent, s) - v * _fit(o.tangent, s)) / o.value
            return Dual(v, t)
        if isinstance(o, ADValue):
            return NotImplemented
        v = self.value / o
        return Dual(v, _fit(self.tangent, np.shape(v)) / o)

    def __rtruediv__(self, o):
        v = o / self.value
        return Dual(v, _fit(self.tangent, np.shape(v)) * (-v / self.value))

    def __pow__(self, o):
        if type(o) is Dual:
            return (o * self.log()).exp()
        if isinstance(o, ADValue):
            return NotImplemented
        if type(o) in (int, float) and o == 2:
            return self * self
        v = self.value**o
        return self._unary(v, o * self.value ** (o - 1))

    def __rpow__(self, o):
        v = o**self.value
        return self._unary(v, v * np.log(o))

    def __matmul__(self, o):
        if type(o) is Dual:
            v = self.value @ o.value
            if np.ndim(o.value) == 1:
                t = self.tangent @ o.value + o.tangent @ self.value.T
            else:
                t = self.tangent @ o.value + self.value @ o.tangent
            return Dual(v, t)
        if isinstance(o, ADValue):
            return NotImplemented
        return Dual(self.value @ o, self.tangent @ o)

    def __rmatmul__(self, o):
        v = o @ self.value
        if np.ndim(self.value) == 1:
            return Dual(v, self.tangent @ np.asarray(o).T)
        return Dual(v, o @ self.tangent)

    # comparisons act on primal values and return plain booleans
    def __lt__(self, o):
        return self.value < primal(o)

    def __le__(self, o):
        return self.value <= primal(o)

    def __gt__(self, o):
        return self.value > primal(o)

    def __ge__(self, o):
        return self.value >= primal(o)

    # -- array structure ----------------------------------------------------
    def __getitem__(self, key):
        if not isinstance(key, tuple):
            key = (key,)
        return Dual(self.value[key], self.tangent[(slice(None),) + key])

    def __len__(self):
        return len(self.value)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return Dual(np.reshape(self.value, shape), self.tangent.reshape((self.nchunk,) + tuple(shape)))

    @property
    def T(self):
        return Dual(self.value.T, np.swapaxes(self.tangent, -1, -2))

    def sum(self, axis=None, keepdims=False):
        if axis is None:
            axis = tuple(range(self.ndim))
        elif not isinstance(axis, tuple):
            axis = (axis,)
        axis = tuple(a % max(self.ndim, 1) for a in axis)
        taxis = tuple(a + 1 for a in axis)
        return Dual(
            np.sum(self.value, axis=axis, keepdims=keepdims),
            np.sum(self.tangent, axis=taxis, keepdims=keepdims),
        )

    def broadcast_to(self, shape):
        return Dual(np.broadcast_to(self.value, shape), _fit(self.tangent, tuple(shape)))

    @staticmethod
    def scatter(shape, key, g, nchunk):
        """Zero Dual of ``shape`` with ``g`` written at ``key``."""
        if not isinstance(key, tuple):
            key = (key,)
        v = np.zeros(shape)
        t = np.zeros((nchunk,) + tuple(shape))
        if type(g) is Dual:
            np.add.at(v, key, g.value)
            np.add.at(t, (slice(None),) + key, g.tangent)
        else:
            np.add.at(v, key, g)
        return Dual(v, t)

    # -- elementary functions -------------------------------------------------
    def exp(self):
        v = np.exp(self.value)
        return self._unary(v, v)

    def log(self):
        return self._unary(np.log(self.value), 1.0 / self.value)

    def sqrt(self):
        v = np.sqrt(self.value)
        return self._unary(v, 0.5 / v)

    def sin(self):
        return self._unary(np.sin(self.value), np.cos(self.value))

    def cos(self):
        return self._unary(np.cos(self.value), -np.sin(self.value))

    def tanh(self):
        v = np.tanh(self.value)
        return self._unary(v, 1.0 - v * v)

    def logistic(self):
        v = _logistic(self.value)
        return self._unary(v, v * (1.0 - v))

    def softplus(self):
        return self._unary(np.logaddexp(0.0, self.value), _logistic(self.value))

    def __abs__(self):
        return self._unary(np.abs(self.value), np.sign(self.value))

    abs = __abs__

    # -- static n-ary helpers used by the ops namespace ----------------------
    @staticmethod
    def where(mask, a, b):
        va, vb = primal_dual(a), primal_dual(b)
        v = np.where(mask, va, vb)
        s = np.shape(v)
        k = _chunk_of(a, b)
        ta = _fit(a.tangent, s) if type(a) is Dual else np.zeros((k,) + s)
        tb = _fit(b.tangent, s) if type(b) is Dual else np.zeros((k,) + s)
        return Dual(v, np.where(mask, ta, tb))

    @staticmethod
    def stack(items):
        k = _chunk_of(*items)
        vals = np.broadcast_arrays(*[primal_dual(x) for x in items])
        s = vals[0].shape
        ts = [_fit(x.tangent, s) if type(x) is Dual else np.zeros((k,) + s) for x in items]
        return Dual(np.stack(vals), np.stack(ts, axis=1))


def primal_dual(x):
    if type(x) is Dual:
        return x.value
    if isinstance(x, ADValue):
        raise UnsupportedOpError(f"cannot mix Dual with {type(x).__name__}")
    return x


def _chunk_of(*items):
    for x in items:
        if type(x) is Dual:
            return x.nchunk
    raise UnsupportedOpError("no Dual operand")
