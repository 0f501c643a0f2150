"""Maximizers used by the fitting driver.

``maximize_lbfgs`` runs limited-memory BFGS with a backtracking Armijo line
search on ``-f``; ``maximize_adam`` runs Adam with norm clipping and a
multiplicative learning-rate decay for noisy objectives.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, InvalidStartError


@dataclass
class LbfgsConfig:
    memory: int = 10
    c1: float = 1e-4
    backtrack: float = 0.5
    max_linesearch: int = 40
    grad_tol: float = 1e-3
    rel_obj_tol: float = 1e-5
    max_iter: int = 1000

    def __post_init__(self):
        if self.memory < 1:
            raise ConfigError("memory must be >= 1")
        if not 0 < self.c1 < 1:
            raise ConfigError("c1 must lie in (0, 1)")
        if not 0 < self.backtrack < 1:
            raise ConfigError("backtrack factor must lie in (0, 1)")
        if self.max_linesearch < 1 or self.max_iter < 0:
            raise ConfigError("iteration limits must be positive")


@dataclass
class AdamConfig:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.999
    clip_norm: float = 1e3
    max_iter: int = 1000

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.lr <= 0 or self.clip_norm <= 0 or not 0 < self.decay <= 1:
            raise ConfigError("lr and clip_norm must be positive and decay in (0, 1]")
        if self.max_iter < 0:
            raise ConfigError("max_iter must be >= 0")


@dataclass
class IterationTrace:
    objective: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    step_size: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def record(self, obj, gnorm, step, t):
        self.objective.append(float(obj))
        self.grad_norm.append(float(gnorm))
        self.step_size.append(float(step))
        self.wall_time.append(float(t))

    def __len__(self):
        return len(self.objective)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: list(d.get(k, [])) for k in ("objective", "grad_norm", "step_size", "wall_time", "events")})


def _two_loop(g, pairs):
    """Apply the L-BFGS inverse-Hessian estimate to ``g`` (descent convention)."""
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def maximize_lbfgs(f_and_grad, x0, config: LbfgsConfig | None = None, callback=None):
    """Maximize ``f``; returns ``(x, trace, reason)``.

    ``f_and_grad(x)`` returns ``(value, gradient)``; a non-finite value (or a
    ``None`` gradient) marks an infeasible point and shortens the step.
    ``reason`` is one of ``grad_tol``, ``rel_obj_tol``, ``max_iter`` or
    ``linesearch_failed``.  At most ``memory`` curvature pairs are stored.
    """
    cfg = config or LbfgsConfig()
    x = np.array(x0, dtype=float)
    t0 = time.perf_counter()
    f, g = f_and_grad(x)
    if g is None or not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise InvalidStartError("objective or gradient is not finite at the starting point")
    # work on the negated objective
    f, g = -float(f), -np.asarray(g, dtype=float)
    trace = IterationTrace()
    trace.record(-f, np.linalg.norm(g), 0.0, time.perf_counter() - t0)
    pairs = deque(maxlen=cfg.memory)
    if np.linalg.norm(g) <= cfg.grad_tol:
        return x, trace, "grad_tol"
    restarted = False
    for _ in range(cfg.max_iter):
        d = -_two_loop(g, pairs)
        slope = g @ d
        if not slope < 0:
            pairs.clear()
            d, slope = -g, -(g @ g)
        step = 1.0 if pairs else min(1.0, 1.0 / max(np.linalg.norm(g), 1e-300))
        accepted = False
        for _ in range(cfg.max_linesearch):
            xn = x + step * d
            fn, gn = f_and_grad(xn)
            if gn is not None and np.isfinite(fn) and np.all(np.isfinite(gn)) and -fn <= f + cfg.c1 * step * slope:
                accepted = True
                break
            step *= cfg.backtrack
        if not accepted:
            if restarted or not pairs:
                trace.events.append("linesearch_failed")
                return x, trace, "linesearch_failed"
            # retry once along steepest ascent with a fresh memory
            trace.events.append("restart")
            restarted = True
            pairs.clear()
            continue
        restarted = False
        fn, gn = -float(fn), -np.asarray(gn, dtype=float)
        s, y = xn - x, gn - g
        sy = s @ y
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
        rel = abs(fn - f) / max(abs(f), abs(fn), 1.0)
        x, f, g = xn, fn, gn
        gnorm = np.linalg.norm(g)
        trace.record(-f, gnorm, step, time.perf_counter() - t0)
        if callback is not None:
            callback(len(trace) - 1, x, -f, gnorm)
        if gnorm <= cfg.grad_tol:
            return x, trace, "grad_tol"
        if rel <= cfg.rel_obj_tol:
            return x, trace, "rel_obj_tol"
    return x, trace, "max_iter"


def maximize_adam(f_and_grad, x0, config: AdamConfig | None = None, callback=None):
    """Adam ascent for a fixed number of iterations; returns ``(x, trace)``.

    ``f_and_grad(x, k)`` receives the iteration index so stochastic objectives
    can refresh their draws.  A non-finite gradient skips the step and halves
    the learning rate.
    """
    cfg = config or AdamConfig()
    x = np.array(x0, dtype=float)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    lr = cfg.lr
    t = 0
    trace = IterationTrace()
    t0 = time.perf_counter()
    for k in range(cfg.max_iter):
        f, g = f_and_grad(x, k)
        if g is None or not np.all(np.isfinite(g)):
            lr *= 0.5
            trace.events.append(f"nonfinite_gradient@{k}")
            trace.record(f if f is not None else -np.inf, np.nan, 0.0, time.perf_counter() - t0)
            continue
        g = np.asarray(g, dtype=float)
        gnorm = np.linalg.norm(g)
        if gnorm > cfg.clip_norm:
            g = g * (cfg.clip_norm / gnorm)
        t += 1
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1**t)
        vhat = v / (1 - cfg.beta2**t)
        x = x + lr * mhat / (np.sqrt(vhat) + cfg.eps)
        trace.record(f, gnorm, lr, time.perf_counter() - t0)
        if callback is not None:
            callback(k, x, f, gnorm)
        lr *= cfg.decay
    return x, trace
