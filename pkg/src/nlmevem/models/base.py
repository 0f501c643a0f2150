"""The model contract shared by every built-in model.

Random effects live in three spaces:

* standardized ``u`` with prior N(0, I) (the space the variational family and
  all optimisers work in),
* transformed ``z = m(theta) + chol(Omega(theta)) u``, normally distributed,
* constrained ``eta = inverse(z)`` per effect (the model's natural scale).

All model functions receive lane-vectorised inputs: ``u``/``eta`` are lists
of ``r`` arrays (or AD values) whose last axis enumerates lanes of a
:class:`~nlmevem.subject.SubjectBatch`.  ``theta`` is the natural-scale
parameter vector (a float array or a vector-valued AD value).
"""

from __future__ import annotations

import numpy as np

from ..autodiff import ops
from ..autodiff.base import LOG_2PI, is_zero, primal
from ..errors import ModelShapeError, PriorCovarianceError
from ..odesolve import Event, OdeProblem, choose_steps, solve_rk4
from ..subject import SubjectBatch
from ..transforms import DomainTransform, ThetaMap


def cholesky(S):
    """Differentiable Cholesky factor of a small symmetric matrix (nested lists)."""
    r = len(S)
    L = [[0.0] * r for _ in range(r)]
    for j in range(r):
        d = S[j][j]
        for k in range(j):
            if not is_zero(L[j][k]):
                d = d - L[j][k] * L[j][k]
        if not np.all(np.asarray(primal(d)) > 0):
            raise PriorCovarianceError("prior covariance is not positive definite")
        L[j][j] = ops.sqrt(d)
        for i in range(j + 1, r):
            s = S[i][j]
            for k in range(j):
                if not (is_zero(L[i][k]) or is_zero(L[j][k])):
                    s = s - L[i][k] * L[j][k]
            L[i][j] = 0.0 if is_zero(s) else s / L[j][j]
    return L


def diag_matrix(values):
    r = len(values)
    return [[values[i] if i == j else 0.0 for j in range(r)] for i in range(r)]


class Model:
    """Base class; subclasses fill in the class attributes and ``predict``."""

    name = "model"
    theta_names: tuple = ()
    theta_lower: tuple = ()
    theta_upper: tuple = ()
    theta_init: tuple = ()
    eta_names: tuple = ()
    eta_transforms: tuple = ()
    responses: tuple = ()
    covariate_names: tuple = ()
    n_states = 0
    supports_reverse = True

    def __init__(self):
        self.theta_lower = np.asarray(self.theta_lower, dtype=float)
        self.theta_upper = np.asarray(self.theta_upper, dtype=float)
        self.theta_init = np.asarray(self.theta_init, dtype=float)
        n = len(self.theta_names)
        if not (len(self.theta_lower) == len(self.theta_upper) == len(self.theta_init) == n):
            raise ModelShapeError(f"{self.name}: inconsistent parameter declarations")
        if len(self.eta_transforms) != len(self.eta_names):
            raise ModelShapeError(f"{self.name}: one domain transform per random effect required")
        self.theta_map = ThetaMap(self.theta_lower, self.theta_upper)
        self.ix = {k: i for i, k in enumerate(self.theta_names)}

    def __repr__(self):
        return f"<{type(self).__name__} {self.name!r} n_theta={self.n_theta} n_eta={self.n_eta}>"

    @property
    def options(self):
        """Constructor keyword arguments that recreate this model."""
        return {}

    @property
    def n_theta(self):
        return len(self.theta_names)

    @property
    def n_eta(self):
        return len(self.eta_names)

    # prior ----------------------------------------------------------------------
    def prior_moments(self, theta):
        """Mean list and covariance (nested lists) of the transformed effects."""
        raise NotImplementedError

    def prior_chol(self, theta):
        _, omega = self.prior_moments(theta)
        return cholesky(omega)

    def transform_eta(self, u, theta):
        """Standardized effects ``u`` (list of r lane values) to constrained scale."""
        m, _ = self.prior_moments(theta)
        C = self.prior_chol(theta)
        for k in range(self.n_eta):
            if not np.all(np.asarray(primal(C[k][k])) > 0):
                raise PriorCovarianceError("prior covariance is not positive definite")
        out = []
        for k in range(self.n_eta):
            z = m[k]
            for j in range(k + 1):
                c = C[k][j]
                if not is_zero(c):
                    z = z + c * u[j]
            out.append(self.eta_transforms[k].inverse(z))
        return out

    def prior_logpdf(self, eta, theta):
        """Log density of the prior at constrained ``eta``."""
        m, _ = self.prior_moments(theta)
        C = self.prior_chol(theta)
        r = self.n_eta
        z = [self.eta_transforms[k].forward(eta[k]) for k in range(r)]
        w = []
        total = 0.0
        for k in range(r):
            s = z[k] - m[k]
            for j in range(k):
                if not is_zero(C[k][j]):
                    s = s - C[k][j] * w[j]
            w.append(s / C[k][k])
            total = total + (-0.5 * LOG_2PI - ops.log(C[k][k]) - 0.5 * (w[k] * w[k]))
            total = total - self.eta_transforms[k].log_abs_det_jacobian(z[k])
        return total

    def theta_log_prior(self, theta):
        """Log prior density of theta for MAP fits (``None``: flat prior)."""
        return None

    # data model ---------------------------------------------------------------------
    def predict(self, batch, eta, theta):
        """Per response: ``(mean, sd)``, each a list over observation times or an
        array broadcastable to ``(n_times, n_lanes)``."""
        raise NotImplementedError

    def conditional_loglik(self, batch, eta, theta):
        """log p(y | eta, theta) per lane, skipping missing entries."""
        if len(batch.times) == 0:
            return np.zeros(batch.n_lanes)
        total = None
        for resp, (mean, sd) in self.predict(batch, eta, theta).items():
            if isinstance(mean, list):
                mean = ops.stack(mean)
            if isinstance(sd, list):
                sd = ops.stack(sd)
            mask = batch.mask[resp]
            if not mask.any():
                continue
            term = ops.normal_logpdf(batch.obs[resp], mean, sd)
            if not mask.all():
                term = ops.where(mask, term, 0.0)
            term = ops.total(term, axis=0)
            total = term if total is None else total + term
        return np.zeros(batch.n_lanes) if total is None else total

    def simulate(self, batch, eta, theta, noise):
        """Observations given standard-normal ``noise[resp]`` of shape (n_times, n_lanes)."""
        out = {}
        for resp, (mean, sd) in self.predict(batch, eta, theta).items():
            mean = np.asarray(primal(ops.stack(mean) if isinstance(mean, list) else mean), dtype=float)
            sd = np.asarray(primal(ops.stack(sd) if isinstance(sd, list) else sd), dtype=float)
            shape = (len(batch.times), batch.n_lanes)
            out[resp] = np.broadcast_to(mean, shape) + np.broadcast_to(sd, shape) * noise[resp]
        return out

    def sample_covariates(self, rng, n):
        """Covariates for simulated subjects whose design does not supply them."""
        return {}

    def prepare(self, batch, theta):
        """Fix any evaluation schedule (ODE step counts) for ``batch`` at ``theta``."""
        return None


class OdeModel(Model):
    """Model whose predictions come from a fixed-step ODE solve."""

    state_names: tuple = ()
    default_lags: dict = {}
    step_policy = "auto"  # or a fixed int per segment
    step_rtol = 1e-6

    @property
    def n_states(self):
        return len(self.state_names)

    def individual(self, batch, eta, theta):
        """Dictionary of individual parameters (lane values)."""
        raise NotImplementedError

    def initial_state(self, batch, p):
        return [0.0] * self.n_states

    def drift(self, p):
        raise NotImplementedError

    def observe(self, batch, p, states, theta):
        """Map saved states to per-response ``(mean, sd)`` lists."""
        raise NotImplementedError

    def ode_problem(self, batch, eta, theta):
        p = self.individual(batch, eta, theta)
        events = []
        for time, amount, cmt, lag_name in batch.doses:
            if cmt >= self.n_states:
                raise ModelShapeError(f"{self.name}: dose compartment {cmt} out of range")
            lag_name = lag_name or self.default_lags.get(cmt)
            t = time + p[lag_name] if lag_name else time
            events.append(Event(t, cmt, amount))
        return OdeProblem(self.drift(p), self.initial_state(batch, p), list(batch.times), events), p

    def predict(self, batch, eta, theta):
        prob, p = self.ode_problem(batch, eta, theta)
        steps = batch.steps
        if steps is None:
            steps = self.step_policy if isinstance(self.step_policy, int) else 20
        sol = solve_rk4(prob, steps)
        return self.observe(batch, p, sol.states, theta)

    def prepare(self, batch, theta):
        if isinstance(self.step_policy, int):
            batch.steps = self.step_policy
            return batch.steps
        theta = np.asarray(primal(theta), dtype=float)
        # probe the prior mean and +-2 sd along each effect for every subject
        r = self.n_eta
        probe = np.zeros((r, 2 * r + 1))
        for k in range(r):
            probe[k, 1 + 2 * k] = 2.0
            probe[k, 2 + 2 * k] = -2.0
        wide = SubjectBatch(batch.subjects, 2 * r + 1, batch.indices)
        u = [np.tile(probe[k], batch.n_subjects) for k in range(r)]
        eta = self.transform_eta(u, theta)
        prob, _ = self.ode_problem(wide, eta, theta)
        batch.steps = choose_steps(prob, rtol=self.step_rtol) or 1
        return batch.steps


def log_transform():
    return DomainTransform("log")


def identity_transform():
    return DomainTransform("identity")
