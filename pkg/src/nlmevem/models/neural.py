"""Two-state absorption model whose drift includes a small neural network."""

import numpy as np

from ..autodiff import ops
from ..autodiff.base import LOG_2PI
from .base import OdeModel, diag_matrix, identity_transform

INF = np.inf


class MiniNeuralODE(OdeModel):
    """Depot ``A`` and central ``B`` with a learned correction term.

    ``A' = -ka A`` and ``B' = ka A - ke B + 0.1 * MLP(A/10, B/10, eta_1, eta_2)``
    where the MLP has two ``tanh`` hidden layers of width ``hidden``.  The
    weights are the first ``hidden**2 + 7*hidden + 1`` entries of theta; the
    remaining five are ``ka, ke, omega_1, omega_2, sigma``.  Observations are
    ``y ~ N(B, sigma^2)``.  Weights carry a N(0, 1) prior for MAP fits.
    """

    name = "mini_neural_ode"
    eta_names = ("eta1", "eta2")
    eta_transforms = (identity_transform(),) * 2
    responses = ("y",)
    state_names = ("depot", "central")
    step_policy = 4

    def __init__(self, hidden=16, init_seed=0):
        h = self.hidden = int(hidden)
        if h < 1:
            raise ValueError("hidden width must be >= 1")
        self.layout = {}
        names, off = [], 0
        for key, shape in (("W1", (h, 4)), ("b1", (h, 1)), ("W2", (h, h)), ("b2", (h, 1)),
                           ("w3", (h,)), ("b3", (1,))):  # fmt: skip
            size = int(np.prod(shape))
            self.layout[key] = (off, off + size, shape)
            names += [f"{key}[{i}]" for i in range(size)]
            off += size
        self.n_weights = off
        names += ["ka", "ke", "omega1", "omega2", "sigma"]
        self.theta_names = tuple(names)
        self.theta_lower = (-INF,) * off + (0.0,) * 5
        self.theta_upper = (INF,) * (off + 5)
        self.init_seed = int(init_seed)
        rng = np.random.default_rng(init_seed)
        w = np.zeros(off)
        for key, (a, b, shape) in self.layout.items():
            fan_in = shape[1] if len(shape) == 2 and key.startswith("W") else (h if key == "w3" else 1)
            if key.startswith("b"):
                continue
            w[a:b] = rng.normal(0.0, 0.5 / np.sqrt(fan_in), size=b - a)
        self.theta_init = tuple(w) + (1.0, 0.2, 0.3, 0.3, 0.1)
        super().__init__()

    @property
    def options(self):
        return {"hidden": self.hidden, "init_seed": self.init_seed}

    def prior_moments(self, theta):
        n = self.n_weights
        return [0.0, 0.0], diag_matrix([theta[n + 2] * theta[n + 2], theta[n + 3] * theta[n + 3]])

    def prior_chol(self, theta):
        n = self.n_weights
        return diag_matrix([theta[n + 2], theta[n + 3]])

    def theta_log_prior(self, theta):
        w = theta[: self.n_weights]
        return -0.5 * self.n_weights * LOG_2PI - 0.5 * ops.total(w * w)

    def _weights(self, theta):
        out = {}
        for key, (a, b, shape) in self.layout.items():
            out[key] = theta[a:b].reshape(shape) if len(shape) == 2 else theta[a:b]
        return out

    def individual(self, batch, eta, theta):
        n = self.n_weights
        p = self._weights(theta)
        p.update(ka=theta[n], ke=theta[n + 1], eta=eta)
        return p

    def drift(self, p):
        W1, b1, W2, b2, w3, b3 = (p[k] for k in ("W1", "b1", "W2", "b2", "w3", "b3"))
        ka, ke = p["ka"], p["ke"]
        e1, e2 = p["eta"]

        def f(t, y):
            a, b = y
            x = ops.stack([0.1 * a, 0.1 * b, e1, e2])
            h1 = ops.tanh(W1 @ x + b1)
            h2 = ops.tanh(W2 @ h1 + b2)
            nn = w3 @ h2 + b3
            ra = ka * a
            return [-ra, ra - ke * b + 0.1 * nn]

        return f

    def observe(self, batch, p, states, theta):
        return {"y": ([s[1] for s in states], theta[self.n_weights + 4])}
