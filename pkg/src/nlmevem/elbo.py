"""Per-subject and population ELBO values and gradients.

The optimisation vector is ``x = [theta_u, kappa_1, ..., kappa_N]`` where
``theta_u`` is the unconstrained population vector and
``kappa_i = [mu_i, scale_raw_i]`` the variational parameters of subject
``i``.  Every subject contributes ``M`` lanes (one per base draw); the lane
integrand is::

    G = log p(y | eta(u), theta) + log N(u; 0, I) - log q(u),
    u = mu + L xi

and the subject ELBO is the average of its ``M`` lanes.  Population values
are reduced with ``math.fsum`` in subject-index order, so the result does not
depend on how batches are scheduled across threads.
"""

from __future__ import annotations

import math
import os
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.base import primal
from .autodiff.dual import Dual
from .autodiff.tape import current_tape
from .errors import (
    ConfigError,
    NonFiniteObjectiveError,
    PriorCovarianceError,
    SolverDivergedError,
)
from .subject import SubjectBatch, make_batches
from .variational import VariationalState, affine, base_draws, scale_dim

DETERMINISTIC = "deterministic_presampled"
STOCHASTIC = "stochastic_resample"
MODES = (DETERMINISTIC, STOCHASTIC)

#: auto mode switches to reverse AD above this many inputs
AUTO_REVERSE_THRESHOLD = 512


@dataclass
class ElboConfig:
    """Settings of the Monte Carlo ELBO.

    ``M`` draws per subject; a multiple of the number of random effects is a
    sensible choice.  ``whiten`` decorrelates deterministic draws so their
    first two sample moments are exact.
    """

    M: int = 15
    mode: str = DETERMINISTIC
    minibatch_percent: float = 100.0
    map_prior: bool = False
    seed: int = 0
    dense: bool = False
    whiten: bool = True
    max_batch: int = 64

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 1:
            raise ConfigError(f"M must be a positive integer, got {self.M!r}")
        self.M = int(self.M)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (0 < self.minibatch_percent <= 100):
            raise ConfigError(f"minibatch_percent must lie in (0, 100], got {self.minibatch_percent!r}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.max_batch < 1:
            raise ConfigError("max_batch must be >= 1")

    @property
    def scale(self):
        return 100.0 / self.minibatch_percent


@dataclass
class ElboValueGrad:
    value: float
    grad_theta: np.ndarray
    grad_kappa: list = field(default_factory=list)


def lane_integrand(model, batch, theta, mu_rows, scale_rows, xi, dense):
    """Per-lane ``G`` for ``batch`` (``xi`` has shape (n_lanes, r))."""
    r = model.n_eta
    xi_rows = [xi[:, k] for k in range(r)]
    u, logdet = affine(mu_rows, scale_rows, xi_rows, dense)
    eta = model.transform_eta(u, theta)
    ll = model.conditional_loglik(batch, eta, theta)
    log_prior = ops.std_normal_logpdf(u[0])
    for k in range(1, r):
        log_prior = log_prior + ops.std_normal_logpdf(u[k])
    log_base = np.sum(ops.std_normal_logpdf(xi), axis=1)
    return ll + log_prior - log_base + logdet


def _merge_steps(schedules):
    """Elementwise maximum of per-subject ODE step schedules."""
    schedules = [s for s in schedules if s is not None]
    if not schedules:
        return None
    if all(isinstance(s, int) for s in schedules):
        return max(schedules)
    lists = [[s] if isinstance(s, int) else list(s) for s in schedules]
    n = max(len(s) for s in lists)
    padded = [s + [max(s)] * (n - len(s)) for s in lists]
    return [int(v) for v in np.max(np.array(padded), axis=0)]


class ElboProblem:
    """The ELBO of one dataset as a function of the packed vector ``x``.

    ODE step schedules are fixed once at ``theta_init`` so the objective is
    an ordinary smooth function of ``x`` during the fit.
    """

    def __init__(self, model, subjects, config: ElboConfig, theta_init=None, ad_mode="auto", threads=None,
                 chunk=8, steps=None):  # fmt: skip
        if not subjects:
            raise ConfigError("at least one subject is required")
        self.model = model
        self.subjects = list(subjects)
        self.config = config
        self.r = model.n_eta
        self.d = scale_dim(self.r, config.dense)
        self.dk = self.r + self.d
        self.n_theta = model.n_theta
        self.N = len(self.subjects)
        self.chunk = int(chunk)
        if ad_mode == "auto":
            ad_mode = "reverse" if self.n_theta + self.N * self.dk > AUTO_REVERSE_THRESHOLD else "forward"
        if ad_mode not in ("forward", "reverse"):
            raise ConfigError(f"ad_mode must be forward, reverse or auto, got {ad_mode!r}")
        self.ad_mode = ad_mode
        self.threads = max(1, int(threads or os.cpu_count() or 1))
        theta0 = model.theta_init if theta_init is None else np.asarray(theta_init, dtype=float)
        self.theta_init = np.asarray(theta0, dtype=float)
        self.batches = make_batches(self.subjects, config.M, config.max_batch)
        if steps is not None:
            # replay a recorded schedule
            if len(steps) != self.N:
                raise ConfigError("one step schedule per subject required")
            self.subject_steps = list(steps)
            for b in self.batches:
                b.steps = _merge_steps([self.subject_steps[i] for i in b.indices])
        else:
            self.subject_steps = [None] * self.N
            for b in self.batches:
                st = model.prepare(b, self.theta_init)
                for i in b.indices:
                    self.subject_steps[i] = st
        self._draws = {}
        self._composed = OrderedDict()

    # packing ------------------------------------------------------------------------
    @property
    def size(self):
        return self.n_theta + self.N * self.dk

    def pack(self, theta, states: Sequence[VariationalState]):
        tu = self.model.theta_map.to_unconstrained(theta)
        return np.concatenate([tu] + [s.flat() for s in states])

    def unpack(self, x):
        x = np.asarray(x, dtype=float)
        theta = np.asarray(self.model.theta_map.to_constrained(x[: self.n_theta]), dtype=float)
        kap = x[self.n_theta :].reshape(self.N, self.dk)
        states = [VariationalState(k[: self.r], k[self.r :], self.config.dense) for k in kap]
        return theta, states

    def initial_point(self, theta=None, states=None):
        theta = self.theta_init if theta is None else theta
        if states is None:
            states = [VariationalState.initial(self.r, self.config.dense) for _ in range(self.N)]
        return self.pack(theta, states)

    # draws ----------------------------------------------------------------------------
    def draws(self, i, iteration=0):
        cfg = self.config
        it = 0 if cfg.mode == DETERMINISTIC else int(iteration)
        key = (i, it)
        xi = self._draws.get(key)
        if xi is None:
            xi = base_draws(cfg.seed, i, it, cfg.M, self.r, whiten=cfg.whiten and cfg.mode == DETERMINISTIC)
            if cfg.mode == DETERMINISTIC:
                self._draws[key] = xi
        return xi

    def _batch_draws(self, batch, iteration):
        return np.concatenate([self.draws(i, iteration) for i in batch.indices], axis=0)

    # batching -------------------------------------------------------------------------
    def batches_for(self, subset=None):
        """Batches covering ``subset`` (sorted subject indices), composed on demand."""
        if subset is None:
            return self.batches
        key = tuple(int(i) for i in subset)
        hit = self._composed.get(key)
        if hit is not None:
            self._composed.move_to_end(key)
            return hit
        out = []
        for b in make_batches([self.subjects[i] for i in key], self.config.M, self.config.max_batch):
            idx = [key[j] for j in b.indices]
            nb = SubjectBatch(b.subjects, self.config.M, idx)
            nb.steps = _merge_steps([self.subject_steps[i] for i in idx])
            out.append(nb)
        self._composed[key] = out
        if len(self._composed) > 64:
            self._composed.popitem(last=False)
        return out

    def minibatch(self, epoch, k):
        """Subject indices of minibatch ``k`` in ``epoch`` (without replacement).

        Each epoch is a fresh permutation; the trailing remainder that does
        not fill a whole batch is dropped.
        """
        size = self.minibatch_size
        n_per = self.N // size
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.config.seed, 2**31 - 1, int(epoch)])))
        perm = rng.permutation(self.N)
        part = perm[(k % n_per) * size : (k % n_per + 1) * size]
        return sorted(int(i) for i in part)

    @property
    def minibatch_size(self):
        return max(1, int(round(self.config.minibatch_percent * self.N / 100.0)))

    @property
    def batches_per_epoch(self):
        return max(1, self.N // self.minibatch_size)

    # evaluation -----------------------------------------------------------------------
    def _kappa(self, x, batch):
        kap = np.asarray(x[self.n_theta :], dtype=float).reshape(self.N, self.dk)
        return kap[batch.indices]

    def _values(self, batch, theta_u, kap_b, xi):
        theta = self.model.theta_map.to_constrained(theta_u)
        kl = kap_b[batch.lane_subject]
        rows = [kl[:, c] for c in range(self.dk)]
        G = lane_integrand(self.model, batch, theta, rows[: self.r], rows[self.r :], xi, self.config.dense)
        return np.asarray(primal(G), dtype=float) * np.ones(batch.n_lanes)

    def _forward(self, batch, theta_u, kap_b, xi, w):
        n, dk, L = self.n_theta, self.dk, batch.n_lanes
        model = self.model
        theta_plain = model.theta_map.to_constrained(theta_u)
        kl = kap_b[batch.lane_subject]
        dirs = [(0, i) for i in range(n)] + [(1, c) for c in range(dk)]
        gt = np.zeros(n)
        gk = np.zeros((batch.n_subjects, dk))
        G_val = None
        for start in range(0, len(dirs), self.chunk):
            part = dirs[start : start + self.chunk]
            kc = len(part)
            t_tan = np.zeros((kc, n))
            k_tan = np.zeros((kc, dk))
            for j, (kind, i) in enumerate(part):
                (k_tan if kind else t_tan)[j, i] = 1.0
            if t_tan.any():
                theta = model.theta_map.to_constrained(Dual(theta_u, t_tan))
            else:
                theta = theta_plain
            rows = []
            for c in range(dk):
                if k_tan[:, c].any():
                    rows.append(Dual(kl[:, c], np.repeat(k_tan[:, c : c + 1], L, axis=1)))
                else:
                    rows.append(kl[:, c])
            G = lane_integrand(model, batch, theta, rows[: self.r], rows[self.r :], xi, self.config.dense)
            if type(G) is Dual:
                val = np.asarray(G.value, dtype=float) * np.ones(L)
                tan = np.broadcast_to(G.tangent, (kc, L)) if G.tangent.shape[1:] != (L,) else G.tangent
            else:
                val = np.asarray(G, dtype=float) * np.ones(L)
                tan = np.zeros((kc, L))
            if G_val is None:
                G_val = val
            wt = (tan * w).reshape(kc, batch.n_subjects, -1).sum(axis=2)  # (kc, B)
            for j, (kind, i) in enumerate(part):
                if kind:
                    gk[:, i] = wt[j]
                else:
                    gt[i] = wt[j].sum()
        return G_val, gt, gk

    def _reverse(self, batch, theta_u, kap_b, xi, w):
        tape = current_tape()
        tape.clear()
        try:
            tu = tape.variable(np.array(theta_u, dtype=float))
            theta = self.model.theta_map.to_constrained(tu)
            mu = tape.variable(np.ascontiguousarray(kap_b[:, : self.r].T))
            sc = tape.variable(np.ascontiguousarray(kap_b[:, self.r :].T))
            ls = batch.lane_subject
            mu_l = mu[:, ls]
            sc_l = sc[:, ls]
            G = lane_integrand(
                self.model, batch, theta, [mu_l[k] for k in range(self.r)], [sc_l[k] for k in range(self.d)], xi,
                self.config.dense,
            )  # fmt: skip
            obj = ops.total(G * w)
            G_val = np.asarray(primal(G), dtype=float) * np.ones(batch.n_lanes)
            adjs = tape.backward(obj)
            gt = adjs[tu.index] if adjs[tu.index] is not None else np.zeros(self.n_theta)
            gmu = adjs[mu.index] if adjs[mu.index] is not None else np.zeros((self.r, batch.n_subjects))
            gsc = adjs[sc.index] if adjs[sc.index] is not None else np.zeros((self.d, batch.n_subjects))
            gk = np.concatenate([np.asarray(gmu).T, np.asarray(gsc).T], axis=1)
            return G_val, np.asarray(gt, dtype=float), gk
        finally:
            tape.clear()

    def _eval_batch(self, batch, x, iteration, want_grad, w_scale):
        theta_u = np.asarray(x[: self.n_theta], dtype=float)
        kap_b = self._kappa(x, batch)
        xi = self._batch_draws(batch, iteration)
        w = np.full(batch.n_lanes, w_scale / self.config.M)
        with np.errstate(all="ignore"):
            try:
                if not want_grad:
                    return self._values(batch, theta_u, kap_b, xi), None, None, None
                if self.ad_mode == "forward":
                    return (*self._forward(batch, theta_u, kap_b, xi, w), None)
                return (*self._reverse(batch, theta_u, kap_b, xi, w), None)
            except (SolverDivergedError, PriorCovarianceError, FloatingPointError) as exc:
                return None, None, None, exc

    def _map(self, fn, items):
        if self.threads == 1 or len(items) == 1:
            return [fn(b) for b in items]
        with ThreadPoolExecutor(max_workers=min(self.threads, len(items))) as pool:
            return list(pool.map(fn, items))

    def theta_prior(self, theta_u, want_grad):
        """``log p(theta)`` and its gradient in ``theta_u`` (zeros when flat or disabled)."""
        n = self.n_theta
        if not self.config.map_prior:
            return 0.0, np.zeros(n)
        theta = self.model.theta_map.to_constrained(np.asarray(theta_u, dtype=float))
        lp = self.model.theta_log_prior(theta)
        if lp is None:
            return 0.0, np.zeros(n)
        if not want_grad:
            return float(primal(lp)), np.zeros(n)
        tape = current_tape()
        tape.clear()
        try:
            tu = tape.variable(np.array(theta_u, dtype=float))
            out = self.model.theta_log_prior(self.model.theta_map.to_constrained(tu))
            g = tape.backward(out)[tu.index]
            return float(primal(out.value)), np.zeros(n) if g is None else np.asarray(g, dtype=float)
        finally:
            tape.clear()

    def evaluate(self, x, want_grad=True, subset=None, iteration=0, strict=False):
        """Population ELBO (plus MAP prior) and optionally its gradient in ``x``.

        ``subset`` restricts the sum to those subjects and applies the
        ``100/s`` scaling; without it the full population is used unscaled.
        Non-finite results give ``-inf`` (and no gradient) unless ``strict``.

        Returns ``(value, grad, subject_elbos)`` with ``subject_elbos`` a
        dict from subject index to its unscaled ELBO.
        """
        x = np.asarray(x, dtype=float)
        scale = 1.0 if subset is None else self.config.scale
        batches = self.batches_for(subset)
        results = self._map(lambda b: self._eval_batch(b, x, iteration, want_grad, scale), batches)
        M = self.config.M
        subj = {}
        bad = []
        grad = np.zeros(self.size) if want_grad else None
        for b, (G, gt, gk, exc) in zip(batches, results):
            if exc is not None:
                if strict:
                    ids = [b.subjects[j].id for j in range(b.n_subjects)]
                    if isinstance(exc, SolverDivergedError) and exc.lanes is not None:
                        lanes = np.atleast_1d(exc.lanes)
                        ids = sorted({b.subjects[int(lane) // M].id for lane in lanes}) or ids
                    raise NonFiniteObjectiveError(f"{type(exc).__name__}: {exc}", subjects=ids) from exc
                bad.extend(b.subjects[j].id for j in range(b.n_subjects))
                continue
            per = G.reshape(b.n_subjects, M)
            for j, i in enumerate(b.indices):
                subj[i] = math.fsum(per[j]) / M
            if want_grad:
                grad[: self.n_theta] += gt
                for j, i in enumerate(b.indices):
                    off = self.n_theta + i * self.dk
                    grad[off : off + self.dk] = gk[j]
        lp, glp = self.theta_prior(x[: self.n_theta], want_grad)
        bad += [self.subjects[i].id for i, v in subj.items() if not np.isfinite(v)]
        if bad:
            if strict:
                raise NonFiniteObjectiveError("non-finite subject ELBO", subjects=bad)
            return -math.inf, None, subj
        value = scale * math.fsum(subj[i] for i in sorted(subj)) + lp
        if want_grad:
            grad[: self.n_theta] += glp
            if not np.all(np.isfinite(grad)):
                if strict:
                    raise NonFiniteObjectiveError("non-finite gradient")
                return -math.inf, None, subj
        if not np.isfinite(value):
            if strict:
                raise NonFiniteObjectiveError("non-finite objective")
            return -math.inf, None, subj
        return value, grad, subj

    def value(self, x, subset=None, iteration=0, strict=False):
        return self.evaluate(x, False, subset, iteration, strict)[0]

    def value_and_grad(self, x, subset=None, iteration=0, strict=False):
        v, g, _ = self.evaluate(x, True, subset, iteration, strict)
        return v, g

    def subject_values(self, x, iteration=0):
        _, _, subj = self.evaluate(x, False, None, iteration, strict=True)
        return np.array([subj[i] for i in range(self.N)])


# functional API ----------------------------------------------------------------------------
def elbo_subject(model, subject, theta, state: VariationalState, draws):
    """ELBO of one subject for explicit base ``draws`` of shape (M, r)."""
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    M = draws.shape[0]
    batch = SubjectBatch([subject], M)
    theta = np.asarray(theta, dtype=float)
    model.prepare(batch, theta)
    rows = [np.full(M, v) for v in state.mu] + [np.full(M, v) for v in state.scale_raw]
    r = model.n_eta
    with np.errstate(all="ignore"):
        G = np.asarray(lane_integrand(model, batch, theta, rows[:r], rows[r:], draws, state.dense), dtype=float)
    G = G * np.ones(M)
    if not np.all(np.isfinite(G)):
        raise NonFiniteObjectiveError("non-finite ELBO term", subjects=[subject.id])
    return math.fsum(G) / M


def _problem(model, subjects, theta, config, ad_mode="auto", threads=1):
    return ElboProblem(model, subjects, config, theta_init=theta, ad_mode=ad_mode, threads=threads)


def elbo_population(model, subjects, theta, states, config: ElboConfig, batch: Optional[Sequence[int]] = None,
                    iteration=0):  # fmt: skip
    """Sum of subject ELBOs (``100/s``-scaled over ``batch`` if given) plus ``log p(theta)`` under MAP."""
    if batch is not None and len(batch) == 0:
        raise ConfigError("batch must be non-empty")
    prob = _problem(model, subjects, theta, config)
    x = prob.pack(theta, states)
    return prob.evaluate(x, False, None if batch is None else sorted(batch), iteration, strict=True)[0]


def elbo_gradient(model, subjects, theta, states, config: ElboConfig, mode="forward", batch=None, iteration=0):
    """Value and gradient of :func:`elbo_population` over the same draws.

    ``grad_theta`` is taken with respect to the natural-scale ``theta``.
    """
    prob = _problem(model, subjects, theta, config, ad_mode=mode)
    x = prob.pack(theta, states)
    v, g, _ = prob.evaluate(x, True, None if batch is None else sorted(batch), iteration, strict=True)
    tu = x[: prob.n_theta]
    dtheta = _theta_jacobian(model.theta_map, tu)
    gk = g[prob.n_theta :].reshape(prob.N, prob.dk)
    return ElboValueGrad(v, g[: prob.n_theta] / dtheta, [row.copy() for row in gk])


def _theta_jacobian(tmap, tu):
    """Elementwise ``d theta / d theta_u``."""
    tu = np.asarray(tu, dtype=float)
    e = np.exp(np.where(tmap.m_log | tmap.m_up, tu, 0.0))
    s = 1.0 / (1.0 + np.exp(-np.where(tmap.m_logit, tu, 0.0)))
    out = np.ones_like(tu)
    out = np.where(tmap.m_log, e, out)
    out = np.where(tmap.m_up, -e, out)
    return np.where(tmap.m_logit, tmap.width * s * (1.0 - s), out)
