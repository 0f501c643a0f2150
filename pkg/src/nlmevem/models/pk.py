"""Pharmacokinetic built-ins solved with the differentiable RK4 integrator."""

import numpy as np

from ..autodiff import ops
from .base import OdeModel, diag_matrix, identity_transform, log_transform

INF = np.inf
LOG2 = float(np.log(2.0))


class OneCompartmentPK(OdeModel):
    """First-order absorption into one compartment, dense 3x3 random-effect covariance.

    The covariance factor is stored in theta directly: log-diagonal entries
    followed by the strict-lower entries ``(2,1), (3,1), (3,2)``.
    """

    name = "one_cmt_pk"
    theta_names = (
        "tvka", "tvcl", "tvv",
        "omega_logdiag_1", "omega_logdiag_2", "omega_logdiag_3",
        "omega_lower_21", "omega_lower_31", "omega_lower_32",
        "sigma_prop", "sigma_add",
    )  # fmt: skip
    theta_lower = (0.0, 0.0, 0.0, -INF, -INF, -INF, -INF, -INF, -INF, 0.0, 0.0)
    theta_upper = (INF,) * 11
    theta_init = (1.0, 0.5, 10.0, np.log(0.3), np.log(0.3), np.log(0.3), 0.0, 0.0, 0.0, 0.1, 0.05)
    eta_names = ("ka", "cl", "v")
    eta_transforms = (log_transform(),) * 3
    responses = ("conc",)
    state_names = ("depot", "central")

    def prior_chol(self, theta):
        d = [ops.exp(theta[3 + k]) for k in range(3)]
        return [[d[0], 0.0, 0.0], [theta[6], d[1], 0.0], [theta[7], theta[8], d[2]]]

    def prior_moments(self, theta):
        C = self.prior_chol(theta)
        omega = [[sum((C[i][k] * C[j][k] for k in range(3)), 0.0) for j in range(3)] for i in range(3)]
        return [ops.log(theta[0]), ops.log(theta[1]), ops.log(theta[2])], omega

    def individual(self, batch, eta, theta):
        return {"ka": eta[0], "cl": eta[1], "v": eta[2]}

    def drift(self, p):
        ka, ke = p["ka"], p["cl"] / p["v"]

        def f(t, y):
            a = ka * y[0]
            return [-a, a - ke * y[1]]

        return f

    def observe(self, batch, p, states, theta):
        sp, sa = theta[9], theta[10]
        cps = [s[1] / p["v"] for s in states]
        sds = [ops.sqrt((sp * cp) * (sp * cp) + sa * sa) for cp in cps]
        return {"conc": (cps, sds)}


class WarfarinPKPD(OdeModel):
    """Warfarin PK (depot/central with lag) and indirect-response PD.

    Random effects (constrained scale): multiplicative factors for clearance,
    volume and absorption half-life (log-normal around the population
    values), the lag-time effect (normal, identity scale) and four
    multiplicative PD factors.  Weight enters through allometric scaling.
    """

    name = "warfarin_pkpd"
    theta_names = (
        "pop_CL", "pop_V", "pop_tabs", "pop_lag", "pop_e0", "pop_emax", "pop_c50", "pop_tover",
        "pk_omega_CL", "pk_omega_V", "pk_omega_tabs", "lag_omega",
        "pd_omega_e0", "pd_omega_emax", "pd_omega_c50", "pd_omega_tover",
        "sigma_prop", "sigma_add", "sigma_fx",
    )  # fmt: skip
    theta_lower = (0.0,) * 5 + (-INF,) + (0.0,) * 13
    theta_upper = (INF,) * 19
    theta_init = (
        0.134, 8.11, 0.523, 0.1, 100.0, -1.0, 1.0, 14.0,
        0.01, 0.01, 0.01, 0.1,
        0.01, 0.01, 0.01, 0.01,
        0.00752, 0.0661, 0.01,
    )  # fmt: skip
    eta_names = ("CL", "V", "tabs", "lag", "e0", "emax", "c50", "tover")
    eta_transforms = (log_transform(),) * 3 + (identity_transform(),) + (log_transform(),) * 4
    responses = ("conc", "pca")
    covariate_names = ("WT",)
    state_names = ("depot", "central", "turnover")
    default_lags = {0: "lag"}

    def prior_moments(self, theta):
        m = [ops.log(theta[0]), ops.log(theta[1]), ops.log(theta[2]), 0.0,
             ops.log(theta[4]), 0.0, ops.log(theta[6]), ops.log(theta[7])]  # fmt: skip
        lag_var = theta[11] * theta[11]
        var = [theta[8], theta[9], theta[10], lag_var, theta[12], theta[13], theta[14], theta[15]]
        return m, diag_matrix(var)

    def prior_chol(self, theta):
        sd = [ops.sqrt(theta[k]) for k in (8, 9, 10)] + [theta[11]]
        sd += [ops.sqrt(theta[k]) for k in (12, 13, 14, 15)]
        return diag_matrix(sd)

    def individual(self, batch, eta, theta):
        wt = batch.covariates["WT"]
        fszv = wt / 70.0
        fszcl = fszv**0.75
        cl = fszcl * eta[0]
        vc = fszv * eta[1]
        ka = LOG2 / eta[2]
        lag = theta[3] * ops.exp(eta[3])
        e0 = eta[4]
        emax = theta[5] * eta[5]
        c50 = eta[6]
        kout = LOG2 / eta[7]
        return {"cl": cl, "vc": vc, "ka": ka, "lag": lag, "e0": e0, "emax": emax,
                "c50": c50, "kout": kout, "rin": e0 * kout}  # fmt: skip

    def initial_state(self, batch, p):
        return [0.0, 0.0, p["e0"]]

    def drift(self, p):
        ka, cl, vc = p["ka"], p["cl"], p["vc"]
        rin, emax, c50, kout = p["rin"], p["emax"], p["c50"], p["kout"]

        def f(t, y):
            depot, central, turnover = y
            cp = central / vc
            ratein = ka * depot
            pd = 1.0 + emax * cp / (c50 + cp)
            return [-ratein, ratein - cl * cp, rin * pd - kout * turnover]

        return f

    def observe(self, batch, p, states, theta):
        sp, sa, sfx = theta[16], theta[17], theta[18]
        cps = [s[1] / p["vc"] for s in states]
        conc_sd = [ops.sqrt((sp * cp) * (sp * cp) + sa * sa) for cp in cps]
        return {"conc": (cps, conc_sd), "pca": ([s[2] for s in states], sfx)}

    def sample_covariates(self, rng, n):
        return {"WT": np.round(np.clip(rng.normal(70.0, 12.0, size=n), 40.0, 110.0), 1)}
