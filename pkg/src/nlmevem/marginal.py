"""Marginal log-likelihood estimators for one subject at fixed theta.

All integrals are over the standardized random effects ``u ~ N(0, I)``, so
the integrand is the log joint ``log p(y | eta(u), theta) + log N(u; 0, I)``
and no domain-transform Jacobians appear.  Everything is accumulated in log
space.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .autodiff import ops
from .autodiff.base import LOG_2PI, primal
from .autodiff.dual import Dual
from .autodiff.tape import Tape
from .errors import (
    DegenerateProposalError,
    PriorCovarianceError,
    SolverDivergedError,
    IndefiniteHessianError,
    UnsupportedDimensionError,
    UnsupportedModelError,
)
from .elbo import _merge_steps
from .subject import SubjectBatch, make_batches
from .variational import VariationalState, affine

METHODS = ("elbo", "is", "laplace", "gh", "closed_form")


@dataclass
class LoglikReport:
    method: str
    per_subject: list
    settings: dict = field(default_factory=dict)
    mc_se: list | None = None
    subject_ids: list | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        self.per_subject = [float(v) for v in self.per_subject]

    @property
    def total(self):
        return math.fsum(self.per_subject)

    @property
    def total_mc_se(self):
        if self.mc_se is None:
            return None
        return math.sqrt(math.fsum(s * s for s in self.mc_se))

    def to_dict(self):
        d = asdict(self)
        d["total"] = self.total
        if self.mc_se is not None:
            d["total_mc_se"] = self.total_mc_se
        return d


_NUMERICAL = (SolverDivergedError, PriorCovarianceError, FloatingPointError)


class JointBatch:
    """Log joint ``log p(y, u | theta)`` in standardized space for subjects
    sharing a design.

    Inputs have shape ``(B, m, r)``: ``m`` evaluation points for each of the
    ``B`` subjects.  The ODE step schedule (if any) is fixed on construction,
    so the joint is a smooth function of ``u``.  Points where the model
    fails numerically evaluate to ``-inf``.
    """

    def __init__(self, model, subjects, theta, steps=None):
        self.model = model
        self.subjects = list(subjects)
        self.theta = np.asarray(theta, dtype=float)
        self.r = model.n_eta
        self.B = len(self.subjects)
        self._batches = {}
        if steps is None:
            steps = model.prepare(SubjectBatch(self.subjects, 1), self.theta)
        self.steps = steps
        # likelihood tempering factor used by the continuation in find_modes
        self.temper = 1.0

    def subset(self, idx):
        """The joint restricted to subjects ``idx``, sharing the step schedule."""
        return JointBatch(self.model, [self.subjects[i] for i in idx], self.theta, self.steps)

    def batch(self, idx, m):
        key = (tuple(idx), m)
        b = self._batches.get(key)
        if b is None:
            b = SubjectBatch([self.subjects[i] for i in idx], m)
            b.steps = self.steps
            if len(self._batches) > 32:
                self._batches.clear()
            self._batches[key] = b
        return b

    def _eval(self, batch, rows, conditional_only=False):
        model = self.model
        eta = model.transform_eta(rows, self.theta)
        out = model.conditional_loglik(batch, eta, self.theta)
        if self.temper != 1.0:
            out = out * self.temper
        if conditional_only:
            return out
        for k in range(self.r):
            out = out + ops.std_normal_logpdf(rows[k])
        return out

    def _block(self, idx, U3, conditional_only):
        b, m, _ = U3.shape
        flat = U3.reshape(b * m, self.r)
        try:
            with np.errstate(all="ignore"):
                out = self._eval(self.batch(idx, m), [flat[:, k] for k in range(self.r)], conditional_only)
            return np.asarray(primal(out), dtype=float) * np.ones(b * m)
        except _NUMERICAL:
            if b * m == 1:
                return np.full(1, -np.inf)
        # isolate the failing points by bisection
        if b > 1:
            h = b // 2
            return np.concatenate([self._block(idx[:h], U3[:h], conditional_only),
                                   self._block(idx[h:], U3[h:], conditional_only)])  # fmt: skip
        h = m // 2
        return np.concatenate([self._block(idx, U3[:, :h], conditional_only),
                               self._block(idx, U3[:, h:], conditional_only)])  # fmt: skip

    def values(self, U, conditional_only=False):
        """Log joint at ``U`` of shape ``(B, m, r)`` (or ``(B, r)``); returns ``(B, m)`` or ``(B,)``."""
        U = np.asarray(U, dtype=float)
        squeeze = U.ndim == 2
        U3 = U[:, None, :] if squeeze else U
        out = self._block(list(range(self.B)), U3, conditional_only).reshape(U3.shape[:2])
        out = np.where(np.isnan(out), -np.inf, out)
        return out[:, 0] if squeeze else out

    def value_grad_hess(self, U):
        """Per-subject value ``(B,)``, gradient ``(B, r)`` and Hessian ``(B, r, r)`` at ``U`` ``(B, r)``.

        One forward-over-reverse sweep: the leaves carry ``r`` tangents on
        every lane, and lanes are independent, so the reverse pass returns
        all subjects' Hessian rows at once.
        """
        U = np.asarray(U, dtype=float).reshape(self.B, self.r)
        try:
            return self._vgh(list(range(self.B)), U)
        except _NUMERICAL:
            if self.B == 1:
                return np.full(1, -np.inf), np.full((1, self.r), np.nan), np.full((1, self.r, self.r), np.nan)
        parts = [self.__class__._single(self, i, U[i]) for i in range(self.B)]
        return tuple(np.concatenate([p[j] for p in parts]) for j in range(3))

    def _single(self, i, u):
        try:
            return self._vgh([i], u[None, :])
        except _NUMERICAL:
            return np.full(1, -np.inf), np.full((1, self.r), np.nan), np.full((1, self.r, self.r), np.nan)

    def _vgh(self, idx, U):
        r, b = self.r, len(idx)
        tape = Tape()
        leaves = []
        for k in range(r):
            t = np.zeros((r, b))
            t[k] = 1.0
            leaves.append(tape.variable(Dual(U[:, k].copy(), t)))
        with np.errstate(all="ignore"):
            lanes = self._eval(self.batch(idx, 1), leaves)
            y = ops.total(lanes)
            if type(y).__name__ != "Var":
                v = np.asarray(primal(primal(lanes)), dtype=float) * np.ones(b)
                return v, np.zeros((b, r)), np.zeros((b, r, r))
            adj = tape.backward(y)
        val = np.asarray(primal(primal(lanes)), dtype=float) * np.ones(b)
        g = np.zeros((b, r))
        H = np.zeros((b, r, r))
        for k, leaf in enumerate(leaves):
            a = adj[leaf.index]
            if a is None:
                continue
            if type(a) is Dual:
                g[:, k] = np.asarray(a.value, dtype=float) * np.ones(b)
                H[:, k, :] = np.broadcast_to(np.asarray(a.tangent, dtype=float), (r, b)).T
            else:
                g[:, k] = np.asarray(a, dtype=float) * np.ones(b)
        H = 0.5 * (H + H.transpose(0, 2, 1))
        bad = ~(np.isfinite(val) & np.all(np.isfinite(g), axis=1) & np.all(np.isfinite(H), axis=(1, 2)))
        val = np.where(bad, -np.inf, val)
        return val, g, H


class SubjectJoint(JointBatch):
    """:class:`JointBatch` for one subject; ``values`` takes ``(K, r)`` points."""

    def __init__(self, model, subject, theta, steps=None):
        super().__init__(model, [subject], theta, steps)
        self.subject = subject

    def values(self, U, conditional_only=False):
        U = np.atleast_2d(np.asarray(U, dtype=float))
        return super().values(U[None], conditional_only)[0]

    def conditional(self, U):
        return self.values(U, conditional_only=True)


@dataclass
class ModeResult:
    u: np.ndarray  # (B, r)
    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray


def _boosted_cholesky(A, boosts=5):
    """Cholesky of ``A`` with up to ``boosts`` Levenberg diagonal shifts."""
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        return None, np.inf
    scale = max(1.0, float(np.max(np.abs(np.diag(A))))) if A.size else 1.0
    lam = 0.0
    for k in range(boosts + 1):
        try:
            return np.linalg.cholesky(A + lam * np.eye(len(A))), lam
        except np.linalg.LinAlgError:
            lam = scale * 1e-8 * 10.0 ** (2 * k)
    return None, lam


TEMPER_LADDER = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)


def find_modes(joint: JointBatch, U0=None, max_iter=100, gtol=1e-9, dtol=1e-12, max_step=1.0, temper=True):
    """Maximize every subject's log joint by damped Newton iterations.

    Directions come from ``-H`` with Levenberg boosting when it is not
    positive definite, are capped at ``max_step`` prior standard deviations
    per coordinate, and each subject backtracks independently (Armijo).  A
    subject converges when its largest gradient entry is below
    ``gtol * max(1, |f|)`` or its Newton decrement ``g' (-H)^-1 g / 2`` is
    below ``dtol``.

    With ``temper`` on, subjects that fail to converge are restarted from
    the prior mean along a continuation ``beta * loglik + log prior`` with
    ``beta`` rising through :data:`TEMPER_LADDER`; highly informative data
    (tight residual error) otherwise trap Newton in narrow curved valleys.
    The restart replaces the first result when it reaches a higher value.
    """
    res = _newton(joint, U0, max_iter, gtol, dtol, max_step)
    if not temper or res.converged.all() or joint.temper != 1.0:
        return res
    idx = np.flatnonzero(~res.converged)
    sub = joint.subset(idx)
    U = np.zeros((len(idx), joint.r))
    for beta in TEMPER_LADDER:
        sub.temper = beta
        alt = _newton(sub, U, max_iter, gtol, dtol, max_step)
        U = alt.u
    better = (alt.converged & ~res.converged[idx]) | (np.nan_to_num(alt.value, nan=-np.inf) > res.value[idx])
    for j, i in enumerate(idx):
        if better[j]:
            res.u[i], res.value[i], res.grad[i], res.hess[i] = alt.u[j], alt.value[j], alt.grad[j], alt.hess[j]
            res.converged[i] = alt.converged[j]
            res.iterations[i] += alt.iterations[j]
    return res


def _newton(joint, U0, max_iter, gtol, dtol, max_step):
    B, r = joint.B, joint.r
    U = np.zeros((B, r)) if U0 is None else np.array(U0, dtype=float).reshape(B, r)
    f, g, H = joint.value_grad_hess(U)
    if not np.all(np.isfinite(f)):
        bad = ~np.isfinite(f)
        U[bad] = 0.0
        f, g, H = joint.value_grad_hess(U)
    iters = np.zeros(B, dtype=int)
    converged = np.zeros(B, dtype=bool)
    done = np.zeros(B, dtype=bool)
    for _ in range(max_iter):
        small = np.max(np.abs(g), axis=1) <= gtol * np.maximum(1.0, np.abs(f))
        converged |= small & ~done
        done |= small | ~np.isfinite(f)
        if done.all():
            break
        D = np.zeros((B, r))
        slope = np.zeros(B)
        for b in np.flatnonzero(~done):
            C, lam = _boosted_cholesky(-H[b], boosts=16)
            D[b] = np.linalg.solve(C.T, np.linalg.solve(C, g[b])) if C is not None else g[b]
            slope[b] = g[b] @ D[b]
            if lam == 0.0 and 0.5 * slope[b] <= dtol:
                # Newton decrement: the remaining ascent is negligible
                converged[b] = done[b] = True
            big = np.max(np.abs(D[b]))
            if big > max_step:
                D[b] *= max_step / big
                slope[b] *= max_step / big
        if done.all():
            break
        step = np.where(done, 0.0, 1.0)
        pending = ~done
        for _ in range(60):
            cand = U + step[:, None] * D
            fc = joint.values(cand)
            ok = pending & np.isfinite(fc) & (fc >= f + 1e-4 * step * slope)
            pending &= ~ok
            if not pending.any():
                break
            step = np.where(pending, 0.5 * step, step)
        # subjects whose line search failed are at a working-precision optimum
        stuck = pending
        converged |= stuck & (np.max(np.abs(g), axis=1) <= 1e-5 * np.maximum(1.0, np.abs(f)))
        done |= stuck
        moved = ~done
        U = np.where(moved[:, None], U + step[:, None] * D, U)
        iters += moved
        if not moved.any():
            break
        fn, gn, Hn = joint.value_grad_hess(U)
        f = np.where(moved, fn, f)
        g = np.where(moved[:, None], gn, g)
        H = np.where(moved[:, None, None], Hn, H)
    else:
        small = np.max(np.abs(g), axis=1) <= gtol * np.maximum(1.0, np.abs(f))
        converged |= small & ~done
    return ModeResult(U, f, g, H, iters, converged)


def laplace_from_mode(f, H, r):
    C, _ = _boosted_cholesky(-H, boosts=0)
    if C is None:
        C, _ = _boosted_cholesky(-H, boosts=5)
        if C is None:
            raise IndefiniteHessianError("-H is not positive definite at the mode")
    logdet = 2.0 * float(np.sum(np.log(np.diag(C))))
    return float(f) + 0.5 * r * LOG_2PI - 0.5 * logdet


def loglik_laplace(model, subject, theta, init_eta=None, joint=None, return_mode=False):
    """Laplace approximation ``log p(y, u*) + r/2 log 2 pi - 1/2 log|-H|``.

    ``init_eta`` is the standardized-space starting point of the inner
    Newton iterations (defaults to the prior mean).
    """
    joint = joint or SubjectJoint(model, subject, theta)
    mode = find_modes(joint, None if init_eta is None else np.asarray(init_eta, dtype=float)[None, :])
    try:
        value = laplace_from_mode(mode.value[0], mode.hess[0], joint.r)
    except IndefiniteHessianError:
        raise IndefiniteHessianError(f"subject {subject.id}: -H is not positive definite at the mode") from None
    if return_mode:
        return value, mode
    return value


def laplace_population(model, subjects, theta, init_u=None, max_batch=64, steps=None):
    """Laplace log-likelihood of every subject, batching subjects by design.

    Returns ``(values, modes, converged)`` with ``modes`` in standardized space.
    ``steps`` optionally maps subject index to a fixed ODE step schedule.
    """
    theta = np.asarray(theta, dtype=float)
    N, r = len(subjects), model.n_eta
    init_u = np.zeros((N, r)) if init_u is None else np.asarray(init_u, dtype=float)
    values = np.zeros(N)
    modes = np.zeros((N, r))
    conv = np.zeros(N, dtype=bool)
    for b in make_batches(subjects, 1, max_batch):
        idx = list(b.indices)
        st = None
        if steps is not None:
            st = _merge_steps([steps[i] for i in idx])
        joint = JointBatch(model, [subjects[i] for i in idx], theta, st)
        mode = find_modes(joint, init_u[idx])
        for j, i in enumerate(idx):
            try:
                values[i] = laplace_from_mode(mode.value[j], mode.hess[j], r)
            except IndefiniteHessianError:
                raise IndefiniteHessianError(
                    f"subject {subjects[i].id}: -H is not positive definite at the mode"
                ) from None
            modes[i] = mode.u[j]
            conv[i] = mode.converged[j]
    return values, modes, conv


def loglik_is(model, subject, theta, proposal: VariationalState, M=1000, seed=0, subject_index=0, joint=None):
    """Importance-sampling estimate of ``log p(y | theta)`` and its delta-method SE.

    The estimate is ``logsumexp(log p(y, u_j) - log q(u_j)) - log M``; the
    standard error of the log follows from the delta method.
    """
    M = int(M)
    if M < 1:
        raise ValueError("M must be >= 1")
    joint = joint or SubjectJoint(model, subject, theta)
    logw = _is_terms(joint, [proposal], M, seed, [subject_index])[0]
    return _is_summary(logw, M, subject.id)


def _is_terms(joint, proposals, M, seed, subject_indices):
    """Log weights ``(B, M)`` for the subjects of ``joint``."""
    r = joint.r
    U = np.zeros((joint.B, M, r))
    log_q = np.zeros((joint.B, M))
    for b, (prop, si) in enumerate(zip(proposals, subject_indices)):
        gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(si), 2**32 - 1])))
        xi = gen.standard_normal((M, r))
        rows = [np.full(M, v) for v in prop.mu] + [np.full(M, v) for v in prop.scale_raw]
        u, logdet = affine(rows[:r], rows[r:], [xi[:, k] for k in range(r)], prop.dense)
        U[b] = np.stack([np.asarray(v, dtype=float) for v in u], axis=1)
        log_q[b] = np.sum(ops.std_normal_logpdf(xi), axis=1) - np.asarray(logdet, dtype=float)
    return JointBatch.values(joint, U) - log_q


def _is_summary(logw, M, sid):
    logw = np.where(np.isnan(logw), -np.inf, logw)
    if not np.any(np.isfinite(logw)):
        raise DegenerateProposalError(f"subject {sid}: all importance weights vanish")
    value = float(logsumexp(logw) - math.log(M))
    if M == 1:
        return value, math.inf
    w = np.exp(logw - np.max(logw))
    return value, float(np.std(w, ddof=1) / math.sqrt(M) / np.mean(w))


def is_population(model, subjects, theta, proposals, M=1000, seed=0, steps=None, max_lanes=16384, max_batch=64):
    """Importance-sampling estimates for every subject; returns ``(values, mc_se)``.

    Subject ``i`` draws from the stream keyed by ``(seed, i)`` so results do
    not depend on batching.
    """
    theta = np.asarray(theta, dtype=float)
    M = int(M)
    if M < 1:
        raise ValueError("M must be >= 1")
    N = len(subjects)
    values, ses = np.zeros(N), np.zeros(N)
    per = max(1, min(max_batch, max_lanes // M))
    for b in make_batches(subjects, 1, per):
        idx = list(b.indices)
        st = None if steps is None else _merge_steps([steps[i] for i in idx])
        joint = JointBatch(model, [subjects[i] for i in idx], theta, st)
        logw = _is_terms(joint, [proposals[i] for i in idx], M, seed, idx)
        for j, i in enumerate(idx):
            values[i], ses[i] = _is_summary(logw[j], M, subjects[i].id)
    return values, ses


def is_log_weights(model, subject, theta, proposal, M, seed=0, subject_index=0):
    """Per-sample log weights (exposed for diagnostics and tests)."""
    joint = SubjectJoint(model, subject, theta)
    return _is_terms(joint, [proposal], int(M), seed, [subject_index])[0]


def default_gh_nodes(r):
    return 64 if r == 1 else 32


def loglik_gh(model, subject, theta, nodes=None, adaptive=True, joint=None):
    """Gauss-Hermite quadrature of the marginal likelihood (``r <= 2``).

    With ``adaptive`` the grid is centred at the mode and scaled by the
    Laplace covariance, which keeps narrow posteriors resolved.
    """
    r = model.n_eta
    if r > 2:
        raise UnsupportedDimensionError(f"Gauss-Hermite quadrature supports r <= 2, model has r = {r}")
    nodes = default_gh_nodes(r) if nodes is None else int(nodes)
    joint = joint or SubjectJoint(model, subject, theta)
    z, w = np.polynomial.hermite_e.hermegauss(nodes)
    logw = np.log(w) - 0.5 * LOG_2PI
    grids = np.meshgrid(*([z] * r), indexing="ij")
    Z = np.stack([g.ravel() for g in grids], axis=1)
    LW = sum(np.meshgrid(*([logw] * r), indexing="ij")).ravel()
    if adaptive:
        mode = find_modes(joint)
        C, _ = _boosted_cholesky(-mode.hess[0], boosts=5)
        if C is None:
            center, S, logdetS = np.zeros(r), np.eye(r), 0.0
        else:
            center = mode.u[0]
            S = np.linalg.inv(C).T  # S S^T = (-H)^-1
            logdetS = -float(np.sum(np.log(np.diag(C))))
        U = center + Z @ S.T
        log_phi = np.sum(ops.std_normal_logpdf(Z), axis=1)
        terms = LW + joint.values(U) - log_phi + logdetS
    else:
        terms = LW + joint.conditional(Z)
    return float(logsumexp(terms))


# closed forms -----------------------------------------------------------------------------
def _mvn_logpdf(y, mean, cov):
    k = len(y)
    if k == 0:
        return 0.0
    C = np.linalg.cholesky(cov)
    z = np.linalg.solve(C, y - mean)
    return float(-0.5 * k * LOG_2PI - np.sum(np.log(np.diag(C))) - 0.5 * z @ z)


def ppca_posterior(model, subject, theta):
    """Exact posterior ``(mean, cov)`` of the latent vector for one PPCA subject."""
    if model.name != "ppca":
        raise UnsupportedModelError(f"no closed-form posterior for model {model.name!r}")
    W, mu, sigma = model.split_theta(theta)
    y = np.array([subject.observations[r][0] for r in model.responses])
    keep = ~np.isnan(y)
    W, mu, y = W[keep], mu[keep], y[keep]
    Mmat = W.T @ W + sigma**2 * np.eye(model.q)
    mean = np.linalg.solve(Mmat, W.T @ (y - mu))
    cov = sigma**2 * np.linalg.inv(Mmat)
    return mean, cov


def linear_gaussian_posterior(model, subject, theta):
    """Exact posterior ``(mean, var)`` of ``eta`` for a random-intercept subject."""
    if model.name != "linear_gaussian":
        raise UnsupportedModelError(f"no closed-form posterior for model {model.name!r}")
    mu, omega, sigma = (float(v) for v in theta)
    y = np.asarray(subject.observations["y"], dtype=float)
    y = y[~np.isnan(y)]
    prec = 1.0 / omega**2 + len(y) / sigma**2
    mean = (mu / omega**2 + np.sum(y) / sigma**2) / prec
    return float(mean), float(1.0 / prec)


def loglik_closed_form(model, subject, theta):
    """Exact ``log p(y | theta)`` for ``linear_gaussian`` and ``ppca``."""
    theta = np.asarray(theta, dtype=float)
    if model.name == "linear_gaussian":
        mu, omega, sigma = theta
        y = np.asarray(subject.observations["y"], dtype=float)
        y = y[~np.isnan(y)]
        n = len(y)
        cov = sigma**2 * np.eye(n) + omega**2 * np.ones((n, n))
        return _mvn_logpdf(y, np.full(n, mu), cov)
    if model.name == "ppca":
        W, mu, sigma = model.split_theta(theta)
        y = np.array([subject.observations[r][0] for r in model.responses])
        keep = ~np.isnan(y)
        W, mu, y = W[keep], mu[keep], y[keep]
        return _mvn_logpdf(y, mu, W @ W.T + sigma**2 * np.eye(len(y)))
    raise UnsupportedModelError(f"no closed-form marginal for model {model.name!r}")


def standardized_posterior(model, subject, theta):
    """Exact posterior in the standardized space as a dense :class:`VariationalState`."""
    theta = np.asarray(theta, dtype=float)
    if model.name == "linear_gaussian":
        m, v = linear_gaussian_posterior(model, subject, theta)
        mu, omega = theta[0], theta[1]
        return VariationalState([(m - mu) / omega], [0.5 * math.log(v) - math.log(omega)], dense=True)
    if model.name == "ppca":
        mean, cov = ppca_posterior(model, subject, theta)
        L = np.linalg.cholesky(cov)
        q = model.q
        raw = [math.log(L[k, k]) for k in range(q)] + [L[i, j] for i in range(1, q) for j in range(i)]
        return VariationalState(mean, raw, dense=True)
    raise UnsupportedModelError(f"no closed-form posterior for model {model.name!r}")
