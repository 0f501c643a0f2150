import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nlmevem.models import catalog_lookup
from nlmevem.variational import (
    VariationalState,
    base_draws,
    entropy,
    sample_eta,
    scale_dim,
    variational_logpdf,
    variational_mode,
)

LOG_2PI = math.log(2 * math.pi)


def dense_state(mu, L):
    L = np.asarray(L, dtype=float)
    r = len(L)
    raw = [math.log(L[k, k]) for k in range(r)] + [L[i, j] for i in range(1, r) for j in range(i)]
    return VariationalState(mu, raw, dense=True)


class TestSampleEta:
    def test_identity(self):
        s = VariationalState.initial(2)
        assert sample_eta(s, [0.5, -1.0]).tolist() == [0.5, -1.0]

    def test_mean_shift(self):
        s = VariationalState([2.0, 3.0], [0.0, 0.0])
        assert sample_eta(s, [0.0, 0.0]).tolist() == [2.0, 3.0]

    def test_dense_hand_product(self):
        s = dense_state([0.0, 0.0], [[1.0, 0.0], [0.5, 2.0]])
        assert sample_eta(s, [1.0, 1.0]) == pytest.approx([1.0, 2.5], abs=1e-15)

    @given(mu=arrays(float, 3, elements=st.floats(-3, 3)), raw=arrays(float, 3, elements=st.floats(-2, 2)),
           xi=arrays(float, 3, elements=st.floats(-4, 4)))  # fmt: skip
    def test_dense_with_zero_offdiagonal_is_diagonal(self, mu, raw, xi):
        diag = VariationalState(mu, raw)
        dense = VariationalState(mu, np.concatenate([raw, np.zeros(3)]), dense=True)
        assert np.array_equal(sample_eta(diag, xi), sample_eta(dense, xi))
        eta = sample_eta(diag, xi)
        assert variational_logpdf(diag, eta) == variational_logpdf(dense, eta)


class TestLogpdf:
    def test_standard_origin(self):
        assert variational_logpdf(VariationalState.initial(2), [0.0, 0.0]) == pytest.approx(-1.8378770664093455, abs=1e-14)

    def test_scaled(self):
        s = VariationalState([0.0, 0.0], [math.log(2.0)] * 2)
        assert variational_logpdf(s, [0.0, 0.0]) == pytest.approx(-3.2241714275292361, abs=1e-14)

    @given(mu=arrays(float, 2, elements=st.floats(-3, 3)), raw=arrays(float, 3, elements=st.floats(-1.5, 1.5)),
           xi=arrays(float, 2, elements=st.floats(-4, 4)))  # fmt: skip
    def test_change_of_variables(self, mu, raw, xi):
        s = VariationalState(mu, raw, dense=True)
        lhs = variational_logpdf(s, sample_eta(s, xi)) + s.log_det_chol()
        rhs = -LOG_2PI - 0.5 * float(xi @ xi)
        assert lhs == pytest.approx(rhs, abs=1e-9)


class TestEntropy:
    def test_unit(self):
        assert entropy(VariationalState.initial(1)) == pytest.approx(1.4189385332046727, abs=1e-15)

    def test_two_dims(self):
        assert entropy(VariationalState.initial(2)) == pytest.approx(2.8378770664093455, abs=1e-15)

    def test_scale_shift(self):
        assert entropy(VariationalState([0.0], [math.log(2.0)])) == pytest.approx(2.1120857137646181, abs=1e-15)

    def test_monte_carlo(self):
        s = dense_state([0.3, -0.2], [[0.7, 0.0], [0.4, 1.3]])
        xi = base_draws(5, 0, 0, 100_000, 2, whiten=False)
        vals = -variational_logpdf(s, sample_eta(s, xi))
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        assert abs(vals.mean() - entropy(s)) < 3 * se


def test_sampling_consistency():
    s = dense_state([1.0, -2.0, 0.5], [[0.5, 0, 0], [0.2, 1.5, 0], [-0.3, 0.1, 0.8]])
    xi = base_draws(11, 3, 0, 100_000, 3, whiten=False)
    eta = sample_eta(s, xi)
    Sigma = s.covariance()
    assert np.all(np.abs(eta.mean(axis=0) - s.mu) < 4 * np.sqrt(np.diag(Sigma) / 1e5))
    emp = np.cov(eta.T)
    assert np.linalg.norm(emp - Sigma) < 0.1 * np.linalg.norm(Sigma)


class TestVariationalMode:
    def test_identity_model(self):
        m = catalog_lookup("ppca", p=3, q=2)
        assert variational_mode(VariationalState([1.0, 2.0], [0.0, 0.0]), m, m.theta_init).tolist() == [1.0, 2.0]

    def test_log_normal_prior_median(self):
        m = catalog_lookup("warfarin_pkpd")
        got = variational_mode(VariationalState.initial(8), m, m.theta_init)
        assert got[0] == pytest.approx(0.134, rel=1e-14)


class TestBaseDraws:
    def test_reproducible_and_keyed(self):
        a = base_draws(1, 2, 3, 15, 4)
        assert np.array_equal(a, base_draws(1, 2, 3, 15, 4))
        assert not np.array_equal(a, base_draws(1, 2, 4, 15, 4))
        assert not np.array_equal(a, base_draws(1, 3, 3, 15, 4))

    def test_whitened_moments(self):
        x = base_draws(0, 0, 0, 15, 4)
        assert np.allclose(x.mean(axis=0), 0.0, atol=1e-14)
        assert np.allclose(x.T @ x / 15, np.eye(4), atol=1e-13)

    def test_negative_key_rejected(self):
        with pytest.raises(ValueError):
            base_draws(-1, 0, 0, 3, 1)


class TestState:
    def test_scale_dim(self):
        assert scale_dim(3, False) == 3 and scale_dim(3, True) == 6

    def test_round_trip(self):
        s = dense_state([0.1, 0.2], [[1.0, 0.0], [0.5, 2.0]])
        t = VariationalState.from_dict(s.to_dict())
        assert np.array_equal(s.flat(), t.flat()) and t.dense
        assert np.allclose(s.chol(), [[1.0, 0.0], [0.5, 2.0]])

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            VariationalState([np.nan], [0.0])

    @given(raw=arrays(float, 6, elements=st.floats(-20, 20)))
    def test_cholesky_invariant(self, raw):
        L = VariationalState(np.zeros(3), raw, dense=True).chol()
        assert np.array_equal(L, np.tril(L)) and np.all(np.diag(L) > 0)
