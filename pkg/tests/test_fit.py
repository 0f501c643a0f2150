import copy

import numpy as np
import pytest

from nlmevem.elbo import ElboConfig
from nlmevem.errors import ConfigError
from nlmevem.fit import FitConfig, FitResult, compute_ebes, fit, warm_start
from nlmevem.marginal import linear_gaussian_posterior, loglik_closed_form, loglik_gh
from nlmevem.optim import AdamConfig, IterationTrace, LbfgsConfig
from nlmevem.subject import Subject
from nlmevem.variational import VariationalState

from conftest import simulated

TIGHT = LbfgsConfig(grad_tol=1e-6, rel_obj_tol=1e-12)


def random_intercept_mle(subjects):
    """Closed-form MLE of (mu, omega, sigma) for balanced random-intercept data."""
    Y = np.array([s.observations["y"] for s in subjects])
    N, n = Y.shape
    ybar = Y.mean(axis=1)
    s2 = ((Y - ybar[:, None]) ** 2).sum() / (N * (n - 1))
    om2 = (n * np.mean((ybar - ybar.mean()) ** 2) - s2) / n
    return np.array([ybar.mean(), np.sqrt(om2), np.sqrt(s2)])


def strip_timing(d):
    d = copy.deepcopy(d)
    d["meta"].pop("timing")
    return d


@pytest.fixture(scope="module")
def lg_fit():
    model, subjects = simulated("linear_gaussian", 50, [1, 2, 3, 4, 5], theta=[0.5, 1.2, 0.8], seed=11)
    cfg = FitConfig.for_variant("deterministic", elbo={"dense": True}, lbfgs=TIGHT)
    return model, subjects, fit(model, subjects, cfg)


class TestFit:
    def test_linear_gaussian_matches_oracles(self, lg_fit):
        model, subjects, res = lg_fit
        assert np.max(np.abs(res.theta - random_intercept_mle(subjects))) < 1e-3
        exact = sum(loglik_closed_form(model, s, res.theta) for s in subjects)
        assert abs(res.elbo - exact) < 0.05
        assert res.loglik["laplace"].total == pytest.approx(exact, abs=1e-8)

    def test_prior_start_reaches_same_optimum(self, lg_fit):
        model, subjects, res = lg_fit
        cfg = FitConfig.for_variant("deterministic", elbo={"dense": True}, lbfgs=TIGHT, kappa_init_method="prior")
        other = fit(model, subjects, cfg)
        assert other.meta["preconditioner"] is None
        np.testing.assert_allclose(other.theta, res.theta, atol=1e-5)

    def test_trace_ascends(self, lg_fit):
        assert np.all(np.diff(lg_fit[2].trace.objective) >= 0)

    def test_logistic_below_quadrature(self):
        model, subjects = simulated("logistic_1d", 40, np.linspace(0, 6, 12), theta=[-3.0, 1.0, 0.8, 0.1], seed=5)
        res = fit(model, subjects, FitConfig.for_variant("deterministic"))
        gh = np.array([loglik_gh(model, s, res.theta, nodes=64) for s in subjects])
        # a 15-draw ELBO may overshoot for single subjects but not in total
        assert res.elbo <= gh.sum()
        assert (gh.sum() - res.elbo) / len(subjects) < 0.1

    def test_replay_is_bit_identical(self, linear_gaussian_data):
        model, subjects = linear_gaussian_data
        cfg = FitConfig.for_variant("deterministic", elbo={"M": 5, "seed": 3})
        a, b = fit(model, subjects[:10], cfg), fit(model, subjects[:10], cfg)
        assert strip_timing(a.to_dict()) == strip_timing(b.to_dict())

    def test_stochastic_replay_is_bit_identical(self, linear_gaussian_data):
        model, subjects = linear_gaussian_data
        cfg = FitConfig.for_variant("stochastic_minibatch", elbo={"M": 3, "seed": 9, "minibatch_percent": 40},
                                    adam=AdamConfig(max_iter=15))  # fmt: skip
        a, b = fit(model, subjects[:10], cfg), fit(model, subjects[:10], cfg)
        assert strip_timing(a.to_dict()) == strip_timing(b.to_dict())
        assert a.meta["minibatch"]["size"] == 4

    def test_result_json_round_trip(self, lg_fit):
        res = lg_fit[2]
        back = FitResult.from_json(res.to_json())
        assert back.to_dict() == res.to_dict()

    def test_scale_equivariance(self, linear_gaussian_data):
        # multiplying the data by c multiplies every fitted parameter by c
        model, subjects = linear_gaussian_data
        c = 3.0
        scaled = [Subject(s.id, s.observation_times, {"y": c * s.observations["y"]}, (), {}) for s in subjects]
        a = fit(model, subjects, FitConfig.for_variant("deterministic", lbfgs=TIGHT))
        b = fit(model, scaled, FitConfig.for_variant("deterministic", lbfgs=TIGHT))
        np.testing.assert_allclose(b.theta / c, a.theta, atol=1e-4)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            FitConfig(variant="stochastic")
        with pytest.raises(ConfigError):
            FitConfig(elbo=ElboConfig(minibatch_percent=50))
        with pytest.raises(ConfigError):
            FitConfig(kappa_init_method="random")

    def test_empty_population(self):
        from nlmevem.models import catalog_lookup

        with pytest.raises(ConfigError):
            fit(catalog_lookup("linear_gaussian"), [])


class TestWarmStart:
    def test_minibatch_then_deterministic(self, lg_fit):
        model, subjects, res = lg_fit
        cfg = FitConfig.for_variant("stochastic_minibatch", elbo={"dense": True, "minibatch_percent": 50},
                                    adam=AdamConfig(max_iter=20, lr=0.05))  # fmt: skip
        rough = fit(model, subjects, cfg)
        base = FitConfig.for_variant("deterministic", elbo={"dense": True}, lbfgs=TIGHT)
        final = fit(model, subjects, warm_start(rough, base))
        np.testing.assert_allclose(final.theta, res.theta, atol=1e-3)

    def test_converged_source_stops_quickly(self, lg_fit):
        model, subjects, res = lg_fit
        base = FitConfig.for_variant("deterministic", elbo={"dense": True})
        again = fit(model, subjects, warm_start(res, base))
        assert again.meta["iterations"] <= 2

    def test_empty_trace(self, lg_fit):
        res = copy.copy(lg_fit[2])
        res.trace = IterationTrace()
        with pytest.raises(ConfigError):
            warm_start(res)

    def test_variant_mismatch(self, lg_fit):
        with pytest.raises(ConfigError):
            warm_start(lg_fit[2], FitConfig.for_variant("stochastic"))

    def test_family_mismatch(self, lg_fit):
        with pytest.raises(ConfigError):
            warm_start(lg_fit[2], FitConfig())


class TestEbes:
    def test_conjugate_posterior_mean(self, linear_gaussian_data):
        model, subjects = linear_gaussian_data
        theta = np.array([0.4, 1.1, 0.9])
        res = compute_ebes(model, subjects, theta)
        expected = [linear_gaussian_posterior(model, s, theta)[0] for s in subjects]
        np.testing.assert_allclose(res.eta[:, 0], expected, atol=1e-9)
        assert res.converged.all()

    def test_start_at_mode_takes_no_steps(self, logistic_data):
        model, subjects = logistic_data
        theta = model.theta_init
        first = compute_ebes(model, subjects, theta)
        states = [VariationalState(u, [0.0], False) for u in first.u]
        res = compute_ebes(model, subjects, theta, states)
        assert np.all(res.iterations == 0)
        np.testing.assert_array_equal(res.u, first.u)

    def test_logistic_grid_search(self, logistic_data):
        model, subjects = logistic_data
        theta = np.array([-3.0, 1.0, 0.8, 0.1])
        res = compute_ebes(model, subjects, theta)
        grid = np.linspace(-4, 4, 10_000)
        t = subjects[0].observation_times[:, None]
        for i, s in enumerate(subjects):
            mean = 1 / (1 + np.exp(-(theta[0] + theta[1] * t + grid)))
            logp = -0.5 * np.sum((s.observations["y"][:, None] - mean) ** 2, axis=0) / theta[3] ** 2
            logp += -0.5 * (grid / theta[2]) ** 2
            assert res.eta[i, 0] == pytest.approx(grid[np.argmax(logp)], abs=grid[1] - grid[0])
