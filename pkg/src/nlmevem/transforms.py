"""Maps between constrained parameter domains and the real line."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.base import ADValue


@dataclass(frozen=True)
class DomainTransform:
    """Bijection between a constrained interval and the reals.

    ``kind`` is ``identity``, ``log`` (``x = lower + exp(u)``), ``logit``
    (``x = lower + (upper - lower) * logistic(u)``) or ``upper``
    (``x = upper - exp(u)``).
    """

    kind: str = "identity"
    lower: float = 0.0
    upper: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "log", "logit", "upper"):
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "logit" and not self.lower < self.upper:
            raise ValueError("logit transform needs lower < upper")

    @classmethod
    def for_bounds(cls, lower=-np.inf, upper=np.inf):
        lo_inf, hi_inf = np.isneginf(lower), np.isposinf(upper)
        if lo_inf and hi_inf:
            return cls("identity")
        if hi_inf:
            return cls("log", float(lower), np.inf)
        if lo_inf:
            return cls("upper", -np.inf, float(upper))
        return cls("logit", float(lower), float(upper))

    def forward(self, x):
        """Constrained value to unconstrained."""
        k = self.kind
        if k == "identity":
            return x
        if k == "log":
            return ops.log(x - self.lower)
        if k == "upper":
            return ops.log(self.upper - x)
        p = (x - self.lower) / (self.upper - self.lower)
        return ops.log(p) - ops.log(1.0 - p)

    def inverse(self, u):
        """Unconstrained value to constrained."""
        k = self.kind
        if k == "identity":
            return u
        if k == "log":
            return ops.exp(u) + self.lower if self.lower else ops.exp(u)
        if k == "upper":
            return self.upper - ops.exp(u)
        return self.lower + (self.upper - self.lower) * ops.logistic(u)

    def log_abs_det_jacobian(self, u):
        """log |d inverse / du| at ``u``."""
        k = self.kind
        if k == "identity":
            return 0.0 * u if isinstance(u, ADValue) else np.zeros_like(np.asarray(u, dtype=float))
        if k in ("log", "upper"):
            return u
        return np.log(self.upper - self.lower) - ops.softplus(-u) - ops.softplus(u)


class ThetaMap:
    """Vectorised domain maps for the population parameter vector.

    Works on whole (possibly AD) vectors with constant masks, so the
    optimizer's unconstrained vector is one differentiable leaf.
    """

    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if self.lower.shape != self.upper.shape or np.any(self.lower >= self.upper):
            raise ValueError("invalid parameter bounds")
        self.transforms = [DomainTransform.for_bounds(lo, hi) for lo, hi in zip(self.lower, self.upper)]
        kinds = np.array([t.kind for t in self.transforms])
        self.m_id = kinds == "identity"
        self.m_log = kinds == "log"
        self.m_logit = kinds == "logit"
        self.m_up = kinds == "upper"
        self.all_identity = bool(np.all(self.m_id))
        self.lo = np.where(np.isfinite(self.lower), self.lower, 0.0)
        self.hi = np.where(np.isfinite(self.upper), self.upper, 0.0)
        self.width = np.where(self.m_logit, self.hi - self.lo, 1.0)

    def __len__(self):
        return len(self.lower)

    def to_unconstrained(self, theta):
        theta = np.asarray(theta, dtype=float)
        if np.any(theta <= self.lower) or np.any(theta >= self.upper):
            bad = np.flatnonzero((theta <= self.lower) | (theta >= self.upper))
            raise ValueError(f"parameters {bad.tolist()} outside their bounds")
        return np.array([t.forward(float(x)) for t, x in zip(self.transforms, theta)], dtype=float)

    def to_constrained(self, u):
        """Map an unconstrained vector (float array or AD vector) to natural scale."""
        if self.all_identity:
            return u
        expo = self.m_log | self.m_up
        safe = ops.where(expo, u, 0.0)
        e = ops.exp(safe)
        logit_in = ops.where(self.m_logit, u, 0.0)
        out = ops.where(self.m_log, self.lo + e, u)
        out = ops.where(self.m_up, self.hi - e, out)
        if np.any(self.m_logit):
            out = ops.where(self.m_logit, self.lo + self.width * ops.logistic(logit_in), out)
        return out
