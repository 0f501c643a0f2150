"""Gaussian variational family over the standardized random effects.

A subject's distribution is ``u = mu + L xi`` with ``xi ~ N(0, I)``.  In
diagonal mode ``L = diag(exp(scale_raw))``; in dense mode ``scale_raw`` holds
the ``r`` log-diagonal entries followed by the strict-lower entries in
row-major order ``(1,0), (2,0), (2,1), (3,0), ...``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.base import LOG_2PI


def scale_dim(r, dense):
    return r * (r + 1) // 2 if dense else r


def lower_pairs(r):
    """Strict-lower index pairs in storage order."""
    return [(i, j) for i in range(1, r) for j in range(i)]


@dataclass
class VariationalState:
    mu: np.ndarray
    scale_raw: np.ndarray
    dense: bool = False

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).reshape(-1)
        self.scale_raw = np.asarray(self.scale_raw, dtype=float).reshape(-1)
        if self.scale_raw.size != scale_dim(self.r, self.dense):
            raise ValueError(
                f"scale_raw has {self.scale_raw.size} entries; expected {scale_dim(self.r, self.dense)}"
            )
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.scale_raw))):
            raise ValueError("variational parameters must be finite")

    @classmethod
    def initial(cls, r, dense=False):
        """The standardized prior: mu = 0, L = I."""
        return cls(np.zeros(r), np.zeros(scale_dim(r, dense)), dense)

    @classmethod
    def from_flat(cls, kappa, r, dense=False):
        kappa = np.asarray(kappa, dtype=float)
        return cls(kappa[:r], kappa[r:], dense)

    @property
    def r(self):
        return self.mu.size

    def flat(self):
        return np.concatenate([self.mu, self.scale_raw])

    def chol(self):
        r = self.r
        L = np.diag(np.exp(self.scale_raw[:r]))
        if self.dense:
            for (i, j), v in zip(lower_pairs(r), self.scale_raw[r:]):
                L[i, j] = v
        return L

    def covariance(self):
        L = self.chol()
        return L @ L.T

    def log_det_chol(self):
        return float(np.sum(self.scale_raw[: self.r]))

    def to_dict(self):
        return {"mu": self.mu.tolist(), "scale_raw": self.scale_raw.tolist(), "dense": self.dense}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mu"], d["scale_raw"], bool(d.get("dense", False)))


def affine(mu_rows, scale_rows, xi_rows, dense):
    """Lane-wise ``u = mu + L xi`` and ``sum(log diag L)``.

    Rows are lists (one entry per coordinate) of lane values; they may be AD
    values.  Diagonal terms are formed first and off-diagonal terms added
    afterwards, so dense mode with zero off-diagonals reproduces diagonal
    mode bit for bit.
    """
    r = len(mu_rows)
    u = [mu_rows[k] + ops.exp(scale_rows[k]) * xi_rows[k] for k in range(r)]
    if dense:
        for (i, j), v in zip(lower_pairs(r), scale_rows[r:]):
            u[i] = u[i] + v * xi_rows[j]
    logdet = scale_rows[0]
    for k in range(1, r):
        logdet = logdet + scale_rows[k]
    return u, logdet


def sample_eta(state: VariationalState, xi):
    """Standardized-space sample ``L xi + mu``."""
    xi = np.asarray(xi, dtype=float)
    rows = [state.mu[k] for k in range(state.r)]
    scale = [state.scale_raw[k] for k in range(state.scale_raw.size)]
    u, _ = affine(rows, scale, [xi[..., k] for k in range(state.r)], state.dense)
    return np.stack([np.asarray(v, dtype=float) for v in u], axis=-1)


def variational_logpdf(state: VariationalState, eta):
    """log q at standardized ``eta`` (change of variables from the base normal)."""
    eta = np.asarray(eta, dtype=float)
    L = state.chol()
    xi = np.linalg.solve(L, (eta - state.mu).T).T if eta.ndim > 1 else np.linalg.solve(L, eta - state.mu)
    r = state.r
    return -0.5 * r * LOG_2PI - 0.5 * np.sum(xi * xi, axis=-1) - state.log_det_chol()


def entropy(state: VariationalState):
    """Closed-form entropy ``r/2 log(2 pi e) + sum(log diag L)``."""
    return 0.5 * state.r * (LOG_2PI + 1.0) + state.log_det_chol()


def variational_mode(state: VariationalState, model, theta):
    """Constrained-space image of the Gaussian mode ``mu``."""
    eta = model.transform_eta([np.asarray(state.mu[k]) for k in range(state.r)], np.asarray(theta, dtype=float))
    return np.array([float(np.asarray(e)) for e in eta])


def base_draws(seed, subject_index, iteration, M, r, whiten=True):
    """Standard-normal base draws ``(M, r)`` for one subject.

    A counter-based Philox stream keyed by ``(seed, subject_index, iteration)``
    makes every subject's draws independent of evaluation order.  With
    ``whiten`` (and ``M > r``) the draws are centred and decorrelated so their
    sample mean is exactly 0 and sample covariance exactly I; expectations of
    quadratic forms are then reproduced without Monte Carlo error.
    """
    if seed < 0 or subject_index < 0 or iteration < 0:
        raise ValueError("seed, subject index and iteration must be non-negative")
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(subject_index), int(iteration)])))
    x = gen.standard_normal((M, r))
    if whiten and M > r:
        xc = x - x.mean(axis=0)
        S = xc.T @ xc / M
        C = np.linalg.cholesky(S)
        x = np.linalg.solve(C, xc.T).T
    return x
