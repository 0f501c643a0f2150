"""Initial-value problem solvers that accept any differentiable scalar type.

The integration range is cut into segments at every event time and every
save time.  Each segment is integrated by fixed-step RK4 with
``h = (segment end - segment start) / n``; because ``h`` is built from the
(possibly differentiable) segment endpoints, derivatives with respect to lag
times flow through the step size.  Gradients of the result are therefore the
exact discrete sensitivities/adjoints of the fixed-step scheme.

States are lists of components.  Each component may be a float, a lane array
or an AD value; lanes may order their breakpoints differently (for instance
when lag times differ), in which case the per-position segment ends and jumps
are selected lane-wise with constant masks.
"""

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.base import ADValue, primal
from .errors import ModelShapeError, SolverDivergedError, SolverStalledError


@dataclass(frozen=True)
class Event:
    """Additive jump of ``amount`` into ``compartment`` at ``time``."""

    time: object
    compartment: int
    amount: object


@dataclass
class OdeProblem:
    drift: Callable
    initial_state: Sequence
    save_times: Sequence
    events: Sequence[Event] = ()
    t0: float = 0.0


@dataclass
class OdeSolution:
    states: list  # per save time, list of components
    step_count: int
    meta: dict = field(default_factory=dict)


def apply_events(state, events):
    """Add each event's amount to its compartment (times are not checked)."""
    state = list(state)
    for ev in events:
        if not 0 <= ev.compartment < len(state):
            raise ModelShapeError(
                f"dose compartment {ev.compartment} out of range for {len(state)} states"
            )
        state[ev.compartment] = state[ev.compartment] + ev.amount
    return state


def _lane_shape(problem):
    arrays = [np.asarray(primal(x), dtype=float) for x in problem.initial_state]
    arrays += [np.asarray(primal(ev.time), dtype=float) for ev in problem.events]
    arrays += [np.asarray(primal(ev.amount), dtype=float) for ev in problem.events]
    return np.broadcast_shapes(*[a.shape for a in arrays]) if arrays else ()


class _Plan:
    """Breakpoint ordering shared by every solver."""

    def __init__(self, problem):
        self.problem = problem
        self.lane_shape = _lane_shape(problem)
        evs = list(problem.events)
        for ev in evs:
            if not 0 <= ev.compartment < len(problem.initial_state):
                raise ModelShapeError(
                    f"dose compartment {ev.compartment} out of range for "
                    f"{len(problem.initial_state)} states"
                )
        self.n_events = len(evs)
        # events are listed first so a stable sort fires them before a save at the same time
        self.times = [ev.time for ev in evs] + [float(t) for t in problem.save_times]
        nb = len(self.times)
        if nb == 0:
            self.positions = []
            return
        prim = np.stack(
            [np.broadcast_to(np.asarray(primal(t), dtype=float), self.lane_shape).ravel() for t in self.times]
        )
        if not np.all(np.isfinite(prim[nb - len(problem.save_times):])):
            raise ModelShapeError("non-finite save time")
        if not np.all(np.isfinite(prim)):
            # event times depend on parameters (lags), so this is a numerical failure
            lanes = np.flatnonzero(~np.all(np.isfinite(prim), axis=0))
            raise SolverDivergedError("non-finite event time", time=float("nan"), lanes=lanes)
        if np.any(prim < problem.t0):
            raise ModelShapeError("event or save time before the start of integration")
        order = np.argsort(prim, axis=0, kind="stable")
        positions = []
        for k in range(nb):
            ids = np.unique(order[k])
            if len(ids) == 1:
                positions.append((int(ids[0]), None))
            else:
                masks = [(int(b), (order[k] == b).reshape(self.lane_shape)) for b in ids]
                positions.append((None, masks))
        last = max(k for k, (b, masks) in enumerate(positions)
                   if (b is not None and b >= self.n_events)
                   or (masks is not None and any(bb >= self.n_events for bb, _ in masks))) \
            if problem.save_times else -1
        self.positions = positions[: last + 1]

    def end_time(self, k):
        b, masks = self.positions[k]
        if b is not None:
            return self.times[b]
        t = self.times[masks[0][0]]
        for bb, m in masks[1:]:
            t = ops.where(m, self.times[bb], t)
        return t


def _check(state, t):
    for comp in state:
        v = np.asarray(primal(comp))
        if not np.all(np.isfinite(v)):
            lanes = np.flatnonzero(~np.isfinite(np.broadcast_to(v, np.shape(v)).ravel()))
            tp = np.asarray(primal(t), dtype=float)
            when = float(np.min(tp)) if tp.size else float("nan")
            raise SolverDivergedError(f"non-finite state near t={when:g}", time=when, lanes=lanes)


def _march(plan, segment):
    """Integrate through every breakpoint; ``segment(state, a, b, k)`` does one span."""
    problem = plan.problem
    state = list(problem.initial_state)
    saved = [None] * len(problem.save_times)
    a = problem.t0
    ne = plan.n_events
    evs = problem.events
    for k, (b, masks) in enumerate(plan.positions):
        end = plan.end_time(k)
        state = segment(state, a, end, k)
        _check(state, end)
        if b is not None:
            if b < ne:
                state = apply_events(state, [evs[b]])
            else:
                saved[b - ne] = list(state)
        else:
            for bb, m in masks:
                if bb < ne:
                    ev = evs[bb]
                    c = ev.compartment
                    state[c] = state[c] + ops.where(m, ev.amount, 0.0)
                else:
                    j = bb - ne
                    prev = saved[j] if saved[j] is not None else [0.0] * len(state)
                    saved[j] = [ops.where(m, s, p) for s, p in zip(state, prev)]
        a = end
    return saved


def _is_zero_span(h):
    return not isinstance(h, ADValue) and np.all(np.asarray(h) == 0.0)


def _rk4_segment(drift, y, a, b, n):
    h = (b - a) / n
    if _is_zero_span(h):
        return y
    half = 0.5 * h
    sixth = h / 6.0
    t = a
    for i in range(n):
        k1 = drift(t, y)
        tm = t + half
        k2 = drift(tm, [yi + half * ki for yi, ki in zip(y, k1)])
        k3 = drift(tm, [yi + half * ki for yi, ki in zip(y, k2)])
        k4 = drift(t + h, [yi + h * ki for yi, ki in zip(y, k3)])
        y = [yi + sixth * (q1 + 2.0 * (q2 + q3) + q4) for yi, q1, q2, q3, q4 in zip(y, k1, k2, k3, k4)]
        t = a + (i + 1) * h
    return y


def _steps_at(steps, k):
    if isinstance(steps, (int, np.integer)):
        n = steps
    else:
        # a lane reordering can add trailing segments; reuse the largest count
        n = steps[k] if k < len(steps) else max(steps)
    if n < 1:
        raise ValueError("steps_per_interval must be >= 1")
    return int(n)


def solve_rk4(problem: OdeProblem, steps_per_interval=10) -> OdeSolution:
    """Fixed-step classic Runge-Kutta.

    ``steps_per_interval`` is an int or a per-segment sequence (one entry per
    sorted breakpoint position, as returned by :func:`choose_steps`).
    """
    plan = _Plan(problem)
    count = 0

    def segment(y, a, b, k):
        nonlocal count
        n = _steps_at(steps_per_interval, k)
        count += n
        return _rk4_segment(problem.drift, y, a, b, n)

    saved = _march(plan, segment)
    return OdeSolution(saved, count, {"solver": "rk4", "steps": steps_per_interval})


# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)


def _dopri_segment(drift, y, a, b, rtol, atol, max_steps):
    """Adaptive integration of one segment in normalised time s in [0, 1]."""
    a = np.asarray(primal(a), dtype=float)
    b = np.asarray(primal(b), dtype=float)
    span = b - a
    if np.all(span == 0.0):
        return y, 0
    comps = [np.asarray(primal(v), dtype=float) for v in y]
    shape = np.broadcast_shapes(np.shape(span), *[c.shape for c in comps])
    y = np.array([np.broadcast_to(c, shape) for c in comps])

    def f(s, yy):
        d = drift(a + s * span, list(yy))
        return np.array([np.asarray(primal(di), dtype=float) * span for di in d])

    s = 0.0
    h = 0.05
    steps = 0
    k1 = f(s, y)
    while s < 1.0:
        if steps >= max_steps:
            raise SolverStalledError(f"adaptive solver exceeded {max_steps} steps")
        h = min(h, 1.0 - s)
        ks = [k1]
        for i in range(1, 7):
            yi = y + h * sum(c * kj for c, kj in zip(_A[i], ks))
            ks.append(f(s + _C[i] * h, yi))
        y5 = y + h * sum(c * kj for c, kj in zip(_B5, ks) if c)
        y4 = y + h * sum(c * kj for c, kj in zip(_B4, ks) if c)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
        err = float(np.max(np.abs(y5 - y4) / scale)) if y.size else 0.0
        steps += 1
        if not np.isfinite(err):
            h *= 0.25
            if h < 1e-14:
                raise SolverStalledError("adaptive step size underflow")
            continue
        if err <= 1.0:
            s += h
            y = y5
            k1 = ks[6]
        fac = 0.9 * err ** -0.2 if err > 0 else 5.0
        h *= min(5.0, max(0.2, fac))
        if h < 1e-14:
            raise SolverStalledError("adaptive step size underflow")
    return list(y), steps


def solve_rk45(problem: OdeProblem, reltol=1e-8, abstol=1e-10, max_steps=100_000) -> OdeSolution:
    """Adaptive Dormand-Prince on plain floats (accuracy reference only)."""
    if reltol <= 0 or abstol <= 0:
        raise ValueError("tolerances must be positive")
    plan = _Plan(problem)
    count = 0

    def segment(y, a, b, k):
        nonlocal count
        out, n = _dopri_segment(problem.drift, y, a, b, reltol, abstol, max_steps - count)
        count += n
        return out

    saved = _march(plan, segment)
    return OdeSolution(saved, count, {"solver": "rk45", "reltol": reltol, "abstol": abstol})


def _spectral_radius(drift, t, y):
    """Largest |eigenvalue| of the drift Jacobian per lane (finite differences)."""
    comps = [np.asarray(primal(v), dtype=float) for v in y]
    shape = np.broadcast_shapes(np.shape(t), *[c.shape for c in comps])
    y = np.array([np.broadcast_to(c, shape) for c in comps])  # (s,) + lanes
    s = y.shape[0]
    f0 = np.array([np.asarray(primal(v), dtype=float) for v in drift(t, list(y))])
    f0 = np.broadcast_to(f0, y.shape)
    cols = []
    for j in range(s):
        d = 1e-7 * np.maximum(1.0, np.abs(y[j]))
        yp = y.copy()
        yp[j] = yp[j] + d
        fj = np.array([np.asarray(primal(v), dtype=float) for v in drift(t, list(yp))])
        cols.append((np.broadcast_to(fj, y.shape) - f0) / d)
    J = np.stack(cols, axis=1)  # (s, s) + lanes
    J = np.moveaxis(J.reshape(s, s, -1), -1, 0)
    return float(np.max(np.abs(np.linalg.eigvals(J)))) if J.size else 0.0


def choose_steps(problem: OdeProblem, rtol=1e-6, ref_rtol=1e-10, max_steps=4096, stability=2.0):
    """Smallest per-segment RK4 step counts that match an adaptive reference.

    Each segment is started from the reference state at its left end; the RK4
    result at the right end must agree with the reference to ``rtol`` relative
    (absolute floor ``rtol`` times the component's largest magnitude).  The
    step is also capped so that ``h * rho <= stability`` where ``rho`` is the
    drift Jacobian's spectral radius at the segment ends; otherwise decayed
    components can pass the accuracy test while RK4 amplifies them.
    """
    plan = _Plan(problem)
    starts, ends, spans = [], [], []

    def reference(y, a, b, k):
        out, _ = _dopri_segment(problem.drift, y, a, b, ref_rtol, ref_rtol * 1e-3, 1_000_000)
        starts.append([np.asarray(primal(v), dtype=float) for v in y])
        ends.append([np.asarray(v, dtype=float) for v in out])
        spans.append((a, b))
        return out

    _march(plan, reference)
    if not starts:
        return []
    ncomp = len(problem.initial_state)
    scale = np.array([max(float(np.max(np.abs(e[c]))) for e in ends + starts) for c in range(ncomp)])
    floor = rtol * np.where(scale > 0, scale, 1.0)

    def ok(k, n):
        a, b = spans[k]
        y = _rk4_segment(problem.drift, [v.copy() for v in starts[k]], primal(a), primal(b), n)
        for c in range(ncomp):
            ref = ends[k][c]
            got = np.asarray(primal(y[c]), dtype=float)
            if not np.all(np.abs(got - ref) <= rtol * np.abs(ref) + floor[c]):
                return False
        return True

    steps = []
    for k in range(len(starts)):
        a, b = spans[k]
        if np.all(np.asarray(primal(b)) == np.asarray(primal(a))):
            steps.append(1)
            continue
        width = float(np.max(np.abs(np.asarray(primal(b)) - np.asarray(primal(a)))))
        rho = max(_spectral_radius(problem.drift, primal(a), starts[k]),
                  _spectral_radius(problem.drift, primal(b), ends[k]))
        n_min = max(1, int(np.ceil(width * rho / stability)))
        n = n_min
        while not ok(k, n):
            if n >= max_steps:
                raise SolverStalledError(f"no RK4 step count up to {max_steps} meets rtol={rtol}")
            n *= 2
        lo, hi = max(n // 2, n_min - 1), n
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if ok(k, mid):
                hi = mid
            else:
                lo = mid
        steps.append(hi)
    return steps
