"""Reverse-mode automatic differentiation on an append-only tape.

Each recorded node is a tuple ``(kind, parents, partials, value, args)``:
the primitive name, indices of the parent nodes (always smaller than the
node's own index), local partial derivatives for elementwise primitives, the
primal value, and the argument template used to replay the computation.

Node values may themselves be :class:`~nlmevem.autodiff.dual.Dual` numbers;
sweeping such a tape yields forward-over-reverse second derivatives.
"""

import operator
import threading

import numpy as np

from ..errors import UnsupportedOpError
from . import ops
from .base import ADValue, primal, shape_of, sum_to


class _Ref:
    __slots__ = ("index",)

    def __init__(self, index):
        self.index = index


class Tape:
    """Growable node arena.  ``clear`` rewinds without releasing storage."""

    def __init__(self):
        self.nodes = []
        self.n = 0

    def __len__(self):
        return self.n

    def clear(self):
        self.n = 0

    def _push(self, node):
        n = self.n
        if n < len(self.nodes):
            self.nodes[n] = node
        else:
            self.nodes.append(node)
        self.n = n + 1
        return Var(self, n, node[3])

    def variable(self, value):
        """Register an independent input."""
        return self._push(("leaf", (), (), value, ()))

    def backward(self, output, seed=None):
        """Sweep adjoints from ``output`` back to every node.

        Returns the list of adjoints indexed by node (``None`` where the node
        does not influence the output).
        """
        if type(output) is not Var or output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        top = output.index
        adjs = [None] * (top + 1)
        adjs[top] = np.ones(shape_of(primal(output.value))) if seed is None else seed
        nodes = self.nodes
        for k in range(top, -1, -1):
            a = adjs[k]
            if a is None:
                continue
            node = nodes[k]
            parents = node[1]
            if not parents:
                continue
            pb = _PULLBACKS.get(node[0])
            if pb is None:
                raise UnsupportedOpError(f"no pullback registered for primitive {node[0]!r}")
            for p, g in zip(parents, pb(a, node, nodes)):
                g = sum_to(g, shape_of(nodes[p][3]))
                prev = adjs[p]
                adjs[p] = g if prev is None else prev + g
        return adjs

    def replay(self, leaf_values=None):
        """Re-execute the recorded program.

        ``leaf_values`` maps leaf node index to a replacement value; other
        leaves keep their recorded values.  Returns the list of node values.
        """
        leaf_values = leaf_values or {}
        vals = [None] * self.n
        for k in range(self.n):
            kind, _, _, value, args = self.nodes[k]
            if kind == "leaf":
                vals[k] = leaf_values.get(k, value)
                continue
            fwd = _FORWARD.get(kind)
            if fwd is None:
                raise UnsupportedOpError(f"no forward rule registered for primitive {kind!r}")
            vals[k] = fwd(*[vals[a.index] if type(a) is _Ref else a for a in args])
        return vals


_local = threading.local()


def current_tape():
    """The calling thread's reusable tape (tapes never cross threads)."""
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def _val(x):
    return x.value if type(x) is Var else x


def _record(kind, args, value, partials):
    tape = None
    parents = []
    parts = []
    refs = []
    for a, d in zip(args, partials):
        if type(a) is Var:
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise UnsupportedOpError("operands recorded on different tapes")
            parents.append(a.index)
            parts.append(d)
            refs.append(_Ref(a.index))
        else:
            refs.append(a)
    for a in args[len(partials):]:
        refs.append(_Ref(a.index) if type(a) is Var else a)
    return tape._push((kind, tuple(parents), tuple(parts), value, tuple(refs)))


def _is_var(x):
    return type(x) is Var


class Var(ADValue):
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "index", "value")
    _rank = 3

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    def __repr__(self):
        return f"Var(#{self.index}, {self.value!r})"

    @property
    def shape(self):
        return shape_of(self.value)

    @property
    def ndim(self):
        return len(self.shape)

    def __len__(self):
        return self.shape[0]

    # binary arithmetic ------------------------------------------------------
    def __add__(self, o):
        return _record("add", (self, o), self.value + _val(o), (None, None))

    def __radd__(self, o):
        return _record("add", (o, self), o + self.value, (None, None))

    def __sub__(self, o):
        return _record("sub", (self, o), self.value - _val(o), (None, -1.0))

    def __rsub__(self, o):
        return _record("sub", (o, self), o - self.value, (None, -1.0))

    def __mul__(self, o):
        vo = _val(o)
        return _record("mul", (self, o), self.value * vo, (vo, self.value))

    def __rmul__(self, o):
        return _record("mul", (o, self), o * self.value, (self.value, o))

    def __truediv__(self, o):
        vo = _val(o)
        v = self.value / vo
        inv = 1.0 / vo
        return _record("div", (self, o), v, (inv, (-v * inv) if _is_var(o) else None))

    def __rtruediv__(self, o):
        v = o / self.value
        return _record("div", (o, self), v, (None, -v / self.value))

    def __neg__(self):
        return _record("neg", (self,), -self.value, (-1.0,))

    def __pos__(self):
        return self

    def __pow__(self, o):
        va = self.value
        if _is_var(o):
            vb = o.value
            v = va**vb
            return _record("pow", (self, o), v, (vb * va ** (vb - 1.0), v * ops.log(va)))
        v = va**o
        return _record("pow", (self, o), v, (o * va ** (o - 1),))

    def __rpow__(self, o):
        v = o**self.value
        return _record("pow", (o, self), v, (None, v * np.log(o)))

    def __matmul__(self, o):
        return _record("matmul", (self, o), self.value @ _val(o), (None, None))

    def __rmatmul__(self, o):
        return _record("matmul", (o, self), o @ self.value, (None, None))

    def __lt__(self, o):
        return primal(self) < primal(o)

    def __le__(self, o):
        return primal(self) <= primal(o)

    def __gt__(self, o):
        return primal(self) > primal(o)

    def __ge__(self, o):
        return primal(self) >= primal(o)

    # structure ---------------------------------------------------------------
    def __getitem__(self, key):
        return _record("index", (self, key), self.value[key], (None,))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return _record("reshape", (self, tuple(shape)), self.value.reshape(tuple(shape)), (None,))

    @property
    def T(self):
        return _record("transpose", (self,), self.value.T, (None,))

    def sum(self, axis=None):
        return _record("sum", (self, axis), ops.total(self.value, axis), (None,))

    # elementary functions ------------------------------------------------------
    def exp(self):
        v = ops.exp(self.value)
        return _record("exp", (self,), v, (v,))

    def log(self):
        return _record("log", (self,), ops.log(self.value), (1.0 / self.value,))

    def sqrt(self):
        v = ops.sqrt(self.value)
        return _record("sqrt", (self,), v, (0.5 / v,))

    def sin(self):
        return _record("sin", (self,), ops.sin(self.value), (ops.cos(self.value),))

    def cos(self):
        return _record("cos", (self,), ops.cos(self.value), (-ops.sin(self.value),))

    def tanh(self):
        v = ops.tanh(self.value)
        return _record("tanh", (self,), v, (1.0 - v * v,))

    def logistic(self):
        v = ops.logistic(self.value)
        return _record("logistic", (self,), v, (v * (1.0 - v),))

    def softplus(self):
        return _record("softplus", (self,), ops.softplus(self.value), (ops.logistic(self.value),))

    def abs(self):
        return _record("abs", (self,), ops.absolute(self.value), (np.sign(primal(self.value)),))

    __abs__ = abs

    @staticmethod
    def where(mask, a, b):
        m = np.asarray(mask, dtype=float)
        v = ops.where(mask, _val(a), _val(b))
        return _record("where", (a, b, mask), v, (m, 1.0 - m))

    @staticmethod
    def stack(items):
        items = tuple(items)
        v = ops.stack([_val(x) for x in items])
        return _record("stack", items, v, tuple(range(len(items))))


# pullbacks ----------------------------------------------------------------------
def _pb_elementwise(adj, node, nodes):
    return [adj if d is None else adj * d for d in node[2]]


def _broadcast(g, shape):
    if isinstance(g, ADValue):
        return g.broadcast_to(shape)
    return np.broadcast_to(g, shape)


def _pb_index(adj, node, nodes):
    (p,) = node[1]
    pval = nodes[p][3]
    key = node[4][1]
    if isinstance(adj, ADValue):
        return [type(adj).scatter(shape_of(pval), key, adj, adj.nchunk)]
    z = np.zeros(shape_of(pval))
    np.add.at(z, key, adj)  # accumulates repeated fancy indices
    return [z]


def _pb_reshape(adj, node, nodes):
    return [adj.reshape(shape_of(nodes[node[1][0]][3]))]


def _pb_transpose(adj, node, nodes):
    return [adj.T]


def _pb_sum(adj, node, nodes):
    pshape = shape_of(nodes[node[1][0]][3])
    axis = node[4][1]
    if axis is None:
        keep = (1,) * len(pshape)
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = {a % len(pshape) for a in axes}
        keep = tuple(1 if i in axes else s for i, s in enumerate(pshape))
    return [_broadcast(adj.reshape(keep) if keep else adj, pshape)]


def _pb_stack(adj, node, nodes):
    return [adj[i] for i in node[2]]


def _pb_matmul(adj, node, nodes):
    a, b = node[4][0], node[4][1]
    va = nodes[a.index][3] if type(a) is _Ref else a
    vb = nodes[b.index][3] if type(b) is _Ref else b
    out = []
    if type(a) is _Ref:
        if len(shape_of(vb)) == 1:
            out.append(adj[:, None] * vb[None, :])
        elif len(shape_of(va)) == 1:
            out.append(vb @ adj)
        else:
            out.append(adj @ vb.T)
    if type(b) is _Ref:
        if len(shape_of(va)) == 1:
            out.append(va[:, None] * adj[None, :])
        else:
            out.append(va.T @ adj)
    return out


_ELEMENTWISE = (
    "add sub mul div neg pow exp log sqrt sin cos tanh logistic softplus abs where"
).split()

_PULLBACKS = {k: _pb_elementwise for k in _ELEMENTWISE}
_PULLBACKS.update(
    index=_pb_index,
    reshape=_pb_reshape,
    transpose=_pb_transpose,
    sum=_pb_sum,
    stack=_pb_stack,
    matmul=_pb_matmul,
)

_FORWARD = {
    "add": operator.add,
    "sub": operator.sub,
    "mul": operator.mul,
    "div": operator.truediv,
    "neg": operator.neg,
    "pow": operator.pow,
    "matmul": operator.matmul,
    "exp": ops.exp,
    "log": ops.log,
    "sqrt": ops.sqrt,
    "sin": ops.sin,
    "cos": ops.cos,
    "tanh": ops.tanh,
    "logistic": ops.logistic,
    "softplus": ops.softplus,
    "abs": ops.absolute,
    "where": lambda a, b, mask: ops.where(mask, a, b),
    "stack": lambda *items: ops.stack(items),
    "index": lambda x, key: x[key],
    "reshape": lambda x, shape: x.reshape(shape),
    "transpose": lambda x: x.T,
    "sum": lambda x, axis: ops.total(x, axis),
}


def register_primitive(kind, forward, pullback):
    """Add a primitive (used by extensions and by the tests)."""
    _FORWARD[kind] = forward
    _PULLBACKS[kind] = pullback
