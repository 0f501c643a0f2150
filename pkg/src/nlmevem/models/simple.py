"""Closed-form-friendly built-ins: random intercept, PPCA, logistic growth."""

import numpy as np

from ..autodiff import ops
from .base import Model, identity_transform

INF = np.inf


class LinearGaussian(Model):
    """Random intercept: ``y_ij ~ N(eta_i, sigma^2)``, ``eta_i ~ N(mu, omega^2)``."""

    name = "linear_gaussian"
    theta_names = ("mu", "omega", "sigma")
    theta_lower = (-INF, 0.0, 0.0)
    theta_upper = (INF, INF, INF)
    theta_init = (0.0, 1.0, 1.0)
    eta_names = ("eta",)
    eta_transforms = (identity_transform(),)
    responses = ("y",)

    def prior_moments(self, theta):
        return [theta[0]], [[theta[1] * theta[1]]]

    def prior_chol(self, theta):
        return [[theta[1]]]

    def predict(self, batch, eta, theta):
        return {"y": (eta[0], theta[2])}


class PPCA(Model):
    """Probabilistic PCA: ``y = W z + mu + eps`` with ``z ~ N(0, I_q)``.

    Each subject contributes one ``p``-vector observed at time 0 as the
    responses ``y1 .. yp``.
    """

    name = "ppca"

    def __init__(self, p=5, q=2):
        self.p, self.q = p, q
        self.theta_names = tuple(f"W{j + 1}_{k + 1}" for j in range(p) for k in range(q))
        self.theta_names += tuple(f"mu{j + 1}" for j in range(p)) + ("sigma",)
        n = p * q + p + 1
        self.theta_lower = (-INF,) * (n - 1) + (0.0,)
        self.theta_upper = (INF,) * n
        w0 = np.zeros((p, q))
        for k in range(q):
            w0[k % p, k] = 1.0
        self.theta_init = tuple(w0.ravel()) + (0.0,) * p + (1.0,)
        self.eta_names = tuple(f"z{k + 1}" for k in range(q))
        self.eta_transforms = (identity_transform(),) * q
        self.responses = tuple(f"y{j + 1}" for j in range(p))
        super().__init__()

    @property
    def options(self):
        return {"p": self.p, "q": self.q}

    def prior_moments(self, theta):
        q = self.q
        return [0.0] * q, [[1.0 if i == j else 0.0 for j in range(q)] for i in range(q)]

    def prior_chol(self, theta):
        return self.prior_moments(theta)[1]

    def transform_eta(self, u, theta):
        return list(u)

    def predict(self, batch, eta, theta):
        p, q = self.p, self.q
        sigma = theta[p * q + p]
        out = {}
        for j in range(p):
            mean = theta[p * q + j]
            for k in range(q):
                mean = mean + theta[j * q + k] * eta[k]
            out[self.responses[j]] = (mean, sigma)
        return out

    def split_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        p, q = self.p, self.q
        return theta[: p * q].reshape(p, q), theta[p * q : p * q + p], float(theta[-1])


class Logistic1D(Model):
    """``y_ij ~ N(logistic(a + b t_ij + eta_i), sigma^2)``, ``eta_i ~ N(0, omega^2)``."""

    name = "logistic_1d"
    theta_names = ("a", "b", "omega", "sigma")
    theta_lower = (-INF, -INF, 0.0, 0.0)
    theta_upper = (INF, INF, INF, INF)
    theta_init = (0.0, 1.0, 1.0, 0.1)
    eta_names = ("eta",)
    eta_transforms = (identity_transform(),)
    responses = ("y",)

    def prior_moments(self, theta):
        return [0.0], [[theta[2] * theta[2]]]

    def prior_chol(self, theta):
        return [[theta[2]]]

    def predict(self, batch, eta, theta):
        t = np.asarray(batch.times, dtype=float)[:, None]
        lin = theta[0] + theta[1] * t + eta[0]
        return {"y": (ops.logistic(lin), theta[3])}
