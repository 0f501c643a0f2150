import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nlmevem.data import read_csv, simulate_population, write_csv
from nlmevem.errors import CatalogError, DataError, PriorCovarianceError
from nlmevem.models import CATALOG, catalog_lookup
from nlmevem.subject import DoseEvent, Subject, SubjectBatch
from nlmevem.transforms import DomainTransform

from conftest import design, simulated, warfarin_design


def lanes(values):
    return [np.atleast_1d(np.asarray(v, dtype=float)) for v in values]


class TestTransformEta:
    def test_identity_standard(self):
        m = catalog_lookup("ppca", p=3, q=2)
        out = m.transform_eta(lanes([0.3, -0.7]), m.theta_init)
        assert np.allclose(np.concatenate(out), [0.3, -0.7], rtol=0, atol=0)

    def test_log_unit(self):
        m = catalog_lookup("one_cmt_pk")
        th = m.theta_init.copy()
        # unit log-normal: log-scale mean 0 and unit variance on the first effect
        th[m.ix["tvka"]] = 1.0
        th[m.ix["omega_logdiag_1"]] = 0.0
        out = m.transform_eta(lanes([1.0, 0.0, 0.0]), th)
        assert float(out[0][0]) == pytest.approx(math.e, rel=1e-14)

    def test_warfarin_prior_median(self):
        m = catalog_lookup("warfarin_pkpd")
        out = m.transform_eta(lanes([0.0] * 8), m.theta_init)
        eta = dict(zip(m.eta_names, (float(v[0]) for v in out)))
        assert eta[m.eta_names[0]] == pytest.approx(0.134, rel=1e-14)

    def test_non_pd_covariance(self):
        m = catalog_lookup("linear_gaussian")
        with pytest.raises(PriorCovarianceError):
            m.transform_eta(lanes([0.1]), np.array([0.0, 0.0, 1.0]))


class TestCatalog:
    def test_warfarin_shape(self):
        m = catalog_lookup("warfarin_pkpd")
        assert m.n_eta == 8 and m.n_states == 3
        assert m.n_theta == 19

    def test_linear_gaussian(self):
        assert catalog_lookup("linear_gaussian").n_eta == 1

    def test_unknown_lists_names(self):
        with pytest.raises(CatalogError) as exc:
            catalog_lookup("unknown")
        for name in CATALOG:
            assert name in str(exc.value)

    def test_neural_sizes(self):
        for hidden in (8, 24):
            m = catalog_lookup("mini_neural_ode", hidden=hidden)
            assert 2 <= m.n_eta <= 4
            assert m.n_theta >= 100 or hidden < 24


class TestSimulate:
    def test_seed_determinism(self):
        _, a = simulated("linear_gaussian", 3, [1, 2], seed=1)
        _, b = simulated("linear_gaussian", 3, [1, 2], seed=1)
        for s, t in zip(a, b):
            assert np.array_equal(s.observations["y"], t.observations["y"])

    def test_sample_mean(self):
        _, subs = simulated("linear_gaussian", 500, [1.0], theta=[0.0, 1.0, 0.01], seed=4)
        ys = np.array([s.observations["y"][0] for s in subs])
        # CLT bound 3 * sqrt((omega^2 + sigma^2) / n)
        assert abs(ys.mean()) < 0.15

    def test_warfarin_shape(self):
        m = catalog_lookup("warfarin_pkpd")
        subs = simulate_population(m, 31, warfarin_design(m), m.theta_init, seed=2)
        assert len(subs) == 31
        for s in subs:
            assert len(s.observations["conc"]) == 10 and len(s.observations["pca"]) == 10

    @pytest.mark.parametrize("name", sorted(CATALOG))
    def test_simulated_data_has_finite_loglik(self, name):
        m = catalog_lookup(name)
        times = [0.5, 1, 2, 4, 8, 12] if m.n_states else [0.0, 1.0, 2.0]
        doses = (DoseEvent(0.0, 100.0, 0),) if m.n_states and name != "mini_neural_ode" else ()
        subs, eta = simulate_population(m, 4, design(m, times, doses), m.theta_init, 3, return_eta=True)
        batch = SubjectBatch(subs, 1)
        m.prepare(batch, m.theta_init)
        ll = np.asarray(m.conditional_loglik(batch, [eta[:, k] for k in range(m.n_eta)], m.theta_init))
        assert ll.shape == (4,) and np.all(np.isfinite(ll))


class TestPriorLogpdf:
    def test_linear_gaussian_formula(self):
        m = catalog_lookup("linear_gaussian")
        th = np.array([0.3, 1.7, 1.0])
        for e in (-2.0, 0.0, 1.3):
            got = float(m.prior_logpdf(lanes([e]), th)[0])
            want = -0.5 * math.log(2 * math.pi) - math.log(1.7) - 0.5 * ((e - 0.3) / 1.7) ** 2
            assert got == pytest.approx(want, abs=1e-12)

    def test_ppca_formula(self):
        m = catalog_lookup("ppca", p=4, q=2)
        z = np.array([0.4, -1.1])
        got = float(m.prior_logpdf(lanes(z), m.theta_init)[0])
        assert got == pytest.approx(-math.log(2 * math.pi) - 0.5 * z @ z, abs=1e-12)

    @pytest.mark.parametrize("name", ["linear_gaussian", "logistic_1d"])
    def test_integrates_to_one(self, name):
        m = catalog_lookup(name)
        x, w = np.polynomial.legendre.leggauss(400)
        x, w = 12 * x, 12 * w
        dens = np.exp(np.asarray(m.prior_logpdf([x], m.theta_init), dtype=float))
        assert float(w @ dens) == pytest.approx(1.0, abs=1e-10)

    def test_ppca_integrates_to_one(self):
        m = catalog_lookup("ppca", p=3, q=2)
        x, w = np.polynomial.legendre.leggauss(120)
        x, w = 9 * x, 9 * w
        X, Y = np.meshgrid(x, x, indexing="ij")
        dens = np.exp(np.asarray(m.prior_logpdf([X.ravel(), Y.ravel()], m.theta_init), dtype=float))
        assert float(np.outer(w, w).ravel() @ dens) == pytest.approx(1.0, abs=1e-10)


class TestDomainTransform:
    KINDS = [DomainTransform("identity"), DomainTransform("log", 0.0, np.inf),
             DomainTransform("log", 2.0, np.inf), DomainTransform("logit", -1.0, 3.0),
             DomainTransform("upper", -np.inf, 5.0)]  # fmt: skip

    CANONICAL = [DomainTransform("identity"), DomainTransform("log", 0.0, np.inf),
                 DomainTransform("logit", 0.0, 1.0), DomainTransform("upper", -np.inf, 0.0)]  # fmt: skip

    @given(u=st.floats(-10, 10), k=st.integers(0, 3))
    def test_forward_inverse(self, u, k):
        t = self.CANONICAL[k]
        assert float(t.forward(t.inverse(u))) == pytest.approx(u, abs=1e-12)

    @given(u=st.floats(-10, 10), k=st.integers(0, 4))
    def test_forward_inverse_shifted(self, u, k):
        # shifted bounds lose bits to cancellation; allow eps * |bound| / |dx/du|
        t = self.KINDS[k]
        bound = max(abs(t.lower) if np.isfinite(t.lower) else 0.0, abs(t.upper) if np.isfinite(t.upper) else 0.0)
        dxdu = math.exp(float(t.log_abs_det_jacobian(u)))
        tol = 1e-12 + 8 * np.finfo(float).eps * bound / dxdu
        assert float(t.forward(t.inverse(u))) == pytest.approx(u, abs=tol)

    @given(u=st.floats(-5, 5), k=st.integers(0, 4))
    def test_jacobian_matches_fd(self, u, k):
        t = self.KINDS[k]
        h = 1e-6
        fd = (float(t.inverse(u + h)) - float(t.inverse(u - h))) / (2 * h)
        got = math.exp(float(t.log_abs_det_jacobian(u)))
        assert got == pytest.approx(abs(fd), rel=1e-6)

    @given(x=st.floats(0.01, 100.0))
    def test_round_trip_on_domain(self, x):
        t = DomainTransform("log")
        assert float(t.inverse(t.forward(x))) == pytest.approx(x, rel=1e-13)

    @given(p=st.floats(0.001, 0.999))
    def test_logit_round_trip(self, p):
        t = DomainTransform("logit", -1.0, 3.0)
        x = -1.0 + 4.0 * p
        assert float(t.inverse(t.forward(x))) == pytest.approx(x, rel=1e-12, abs=1e-12)


class TestSubjectAndCsv:
    def test_unsorted_times_rejected(self):
        with pytest.raises(DataError):
            Subject("a", [1.0, 0.5], {"y": [1.0, 2.0]})

    def test_length_mismatch_rejected(self):
        with pytest.raises(DataError):
            Subject("a", [1.0, 2.0], {"y": [1.0]})

    def test_negative_dose_rejected(self):
        with pytest.raises(DataError):
            DoseEvent(0.0, -1.0, 0)

    def test_round_trip(self, tmp_path):
        m = catalog_lookup("warfarin_pkpd")
        subs = simulate_population(m, 5, warfarin_design(m), m.theta_init, seed=9)
        # knock out one entry to exercise the missing marker
        obs = dict(subs[0].observations)
        obs["pca"] = obs["pca"].copy()
        obs["pca"][3] = np.nan
        subs[0] = subs[0].with_observations(obs)
        path = tmp_path / "d.csv"
        write_csv(subs, path, responses=list(m.responses), covariates=sorted(m.covariate_names))
        back = read_csv(path, responses=m.responses)
        assert [s.id for s in back] == [s.id for s in subs]
        for a, b in zip(subs, back):
            assert np.array_equal(a.observation_times, b.observation_times)
            for r in m.responses:
                assert np.array_equal(a.observations[r], b.observations[r], equal_nan=True)
            assert a.dose_events == b.dose_events
            assert a.covariates == b.covariates

    def test_bad_row_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,time,evid,amt,cmt,y\n1,0,0,.,.,1.0\n1,1,0,.,.,abc\n")
        with pytest.raises(DataError) as exc:
            read_csv(path)
        assert "3" in str(exc.value)

    def test_missing_observation_skipped(self):
        m = catalog_lookup("linear_gaussian")
        s_full = Subject("a", [1.0, 2.0], {"y": [0.5, 9.0]})
        s_miss = Subject("a", [1.0, 2.0], {"y": [0.5, np.nan]})
        s_one = Subject("a", [1.0], {"y": [0.5]})
        th = np.array([0.0, 1.0, 1.0])
        vals = [float(np.asarray(m.conditional_loglik(SubjectBatch([s], 1), lanes([0.2]), th))[0])
                for s in (s_full, s_miss, s_one)]  # fmt: skip
        assert vals[1] == vals[2] != vals[0]
