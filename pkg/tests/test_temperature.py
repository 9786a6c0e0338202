import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import lambertw as scipy_lambertw

from adaptau.dataset import Interactions, zipf_interactions
from adaptau.embedding import EmbeddingTable, xavier_init
from adaptau.losses import positive_mass
from adaptau.oracles import gaussian_cosine_model
from adaptau.temperature import (
    INV_E,
    BracketError,
    TemperatureState,
    estimate_mu,
    estimate_mu_plus,
    estimate_sigmas,
    lambert_w,
    tau0_full,
    tau0_oracle_bisect,
    tau0_simplified,
    tau_user,
    update_user_loss_stats,
    user_temperatures,
)

# Yelp2018-sized statistics: |D| and the tau0 back-solved gap
YELP = dict(n=31831, m=40841, D_size=1666869)


class TestLambertW:
    def test_anchors(self):
        assert lambert_w(0.0) == 0.0
        assert abs(lambert_w(math.e) - 1.0) < 1e-12
        assert abs(lambert_w(-INV_E) + 1.0) < 1e-12

    def test_residual_grid(self):
        x = np.linspace(-INV_E, 10, 1000)
        w = lambert_w(x)
        assert np.max(np.abs(w * np.exp(w) - x)) < 1e-12

    def test_matches_scipy(self):
        x = np.concatenate([np.linspace(-0.36, 10, 500), np.logspace(1, 8, 50)])
        np.testing.assert_allclose(lambert_w(x), scipy_lambertw(x).real, rtol=1e-12, atol=1e-12)

    def test_domain(self):
        with pytest.raises(ValueError):
            lambert_w(-0.4)
        # within 1e-12 of the branch point snaps onto it
        assert lambert_w(-INV_E - 1e-13) == -1.0

    @given(st.floats(-INV_E, 1e6))
    def test_inverse_identity(self, x):
        w = lambert_w(x)
        assert abs(w * math.exp(w) - x) <= 1e-12 * max(1.0, abs(x))
        assert w >= -1.0

    def test_monotone(self):
        x = np.linspace(-INV_E, 50, 2000)
        assert np.all(np.diff(lambert_w(x)) > 0)


class TestCosineStatistics:
    def test_identical_embeddings(self):
        t = EmbeddingTable(np.ones((3, 4)), np.ones((5, 4)))
        data = Interactions.from_pairs([[0, 0], [1, 3]], 3, 5)
        assert estimate_mu_plus(t, data) == pytest.approx(1.0)
        assert estimate_mu(t) == pytest.approx(1.0)
        assert estimate_sigmas(t, data) == pytest.approx((0.0, 0.0), abs=1e-12)

    def test_mean_of_two(self):
        # cosines 0.4 and 0.6 with unit user (1, 0)
        items = np.array([[0.4, math.sqrt(1 - 0.16)], [0.6, math.sqrt(1 - 0.36)]])
        t = EmbeddingTable(np.array([[1.0, 0.0]]), items)
        assert estimate_mu_plus(t, Interactions.from_pairs([[0, 0], [0, 1]], 1, 2)) == pytest.approx(0.5)

    def test_random_init_near_zero(self):
        data = zipf_interactions(500, 1000, mean_degree=20, seed=0)
        t = xavier_init(500, 1000, 64, seed=0)
        assert len(data) >= 10_000
        assert abs(estimate_mu_plus(t, data)) < 0.05
        assert abs(estimate_mu(t)) < 0.05

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_mu_and_sigma_match_enumeration(self, seed):
        data = zipf_interactions(30, 40, mean_degree=5, seed=seed)
        t = xavier_init(30, 40, 6, seed=seed)
        F = t.score_matrix()
        assert abs(estimate_mu(t) - F.mean()) < 1e-12
        sigma2, sigma2_plus = estimate_sigmas(t, data)
        assert abs(sigma2 - F.var()) < 1e-12
        assert abs(sigma2_plus - F[data.users, data.items].var()) < 1e-12

    def test_two_point_variance(self):
        a = 0.3
        items = np.array([[a, math.sqrt(1 - a * a)], [-a, math.sqrt(1 - a * a)]])
        t = EmbeddingTable(np.array([[1.0, 0.0]]), items)
        _, s2p = estimate_sigmas(t, Interactions.from_pairs([[0, 0], [0, 1]], 1, 2))
        assert s2p == pytest.approx(a * a)

    def test_sampled_sigma_close_to_exact(self):
        data = zipf_interactions(100, 200, seed=0)
        t = xavier_init(100, 200, 8, seed=0)
        exact, _ = estimate_sigmas(t, data)
        sampled, _ = estimate_sigmas(t, data, sample_size=100_000, seed=1)
        assert sampled == pytest.approx(exact, rel=0.03)


class TestClosedForms:
    gap = 0.099263 * math.log(31831 * 40841 / (2 * 1666869))

    def test_simplified_yelp(self):
        assert math.log(31831 * 40841 / (2 * 1666869)) == pytest.approx(5.966, abs=1e-3)
        assert self.gap == pytest.approx(0.5922, abs=1e-4)
        assert tau0_simplified(self.gap, 0.0, **YELP) == pytest.approx(0.099263, abs=1e-9)

    def test_full_yelp(self):
        assert tau0_full(self.gap, 0.0, -0.004362, 0.0, **YELP) == pytest.approx(0.095602, abs=1e-3)

    def test_degenerate_gap(self):
        with pytest.warns(UserWarning):
            assert tau0_simplified(0.3, 0.3, 10, 10, 5) == 0.02

    def test_linear_in_gap(self):
        a = tau0_simplified(0.1, 0.0, 100, 100, 50, clamp=False)
        b = tau0_simplified(0.2, 0.0, 100, 100, 50, clamp=False)
        assert b == pytest.approx(2 * a)

    def test_clamped(self):
        assert tau0_simplified(50.0, 0.0, 100, 100, 50) == 1.0

    def test_dense_data_rejected(self):
        with pytest.raises(ValueError):
            tau0_simplified(0.5, 0.0, 2, 2, 3)

    @pytest.mark.parametrize("s", [0.0, 1e-8, -1e-8])
    def test_full_converges_to_simplified(self, s):
        simple = tau0_simplified(0.4, 0.05, 1000, 2000, 30_000, clamp=False)
        full = tau0_full(0.4, 0.05, s, 0.0, 1000, 2000, 30_000, clamp=False)
        assert abs(full - simple) / simple < 1e-6

    def test_negative_discriminant_falls_back(self):
        with pytest.warns(UserWarning, match="discriminant"):
            v = tau0_full(0.01, 0.0, -1.0, 0.0, 1000, 2000, 30_000, clamp=False)
        assert v == pytest.approx(tau0_simplified(0.01, 0.0, 1000, 2000, 30_000, clamp=False))

    def test_full_is_root(self):
        gap, s, L = 0.3, -0.01, math.log(1000 * 2000 / 60_000)
        tau = tau0_full(gap, 0.0, s, 0.0, 1000, 2000, 30_000, clamp=False)
        x = 1 / tau
        assert 0.5 * s * x * x + gap * x - L == pytest.approx(0.0, abs=1e-10)


class TestOracleBisect:
    def test_condition_met(self):
        t, data = gaussian_cosine_model()
        tau = tau0_oracle_bisect(t, data, tol=1e-9, tau_min=1e-3, tau_max=10)
        S = positive_mass(t, data, tau)
        assert abs(S.mean() - 0.5) < 1e-8

    def test_mass_monotone_in_tau(self):
        t, data = gaussian_cosine_model()
        grid = np.geomspace(1e-2, 10, 40)
        S = [positive_mass(t, data, tau).mean() for tau in grid]
        assert np.all(np.diff(S) < 0)

    def test_not_bracketed(self):
        t = EmbeddingTable(np.ones((2, 3)), np.ones((4, 3)))
        data = Interactions.from_pairs([[0, 0], [1, 1]], 2, 4)
        with pytest.raises(BracketError, match="not bracketed"):
            tau0_oracle_bisect(t, data)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_simplified_within_30_percent(self, seed):
        t, data = gaussian_cosine_model(seed=seed)
        simple = tau0_simplified(estimate_mu_plus(t, data), estimate_mu(t), t.n, t.m, len(data), clamp=False)
        oracle = tau0_oracle_bisect(t, data, tau_min=1e-3, tau_max=10)
        assert abs(simple - oracle) / oracle < 0.3


class TestUserTemperatures:
    def test_equal_losses(self):
        taus = user_temperatures(0.1, np.full(5, 2.0), 2.0)
        np.testing.assert_allclose(taus, 0.1)

    def test_w_of_e(self):
        m_u, beta = 1.0, 0.5
        L = m_u + 2 * beta * math.e
        assert user_temperatures(0.2, np.array([L]), m_u, beta)[0] == pytest.approx(0.2 * math.e)

    def test_clamp_boundary(self):
        # (L - m_u) / (2 beta) far below -1/e -> tau0 / e
        assert user_temperatures(0.2, np.array([0.0]), 10.0, 1.0)[0] == pytest.approx(0.2 / math.e)

    def test_nan_loss_falls_back(self):
        np.testing.assert_allclose(user_temperatures(0.15, np.array([np.nan, 1.0]), 1.0), [0.15, 0.15])

    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0.05, 0.5), st.floats(0.1, 5))
    def test_monotone(self, a, b, tau0, beta):
        lo, hi = sorted((a, b))
        t = user_temperatures(tau0, np.array([lo, hi]), 3.0, beta, 1e-9, 1e9)
        assert t[0] <= t[1] * (1 + 1e-12)

    def test_bounds_respected(self):
        taus = user_temperatures(0.1, np.linspace(0, 100, 50), 1.0, 0.1)
        assert taus.min() >= 0.02 and taus.max() <= 1.0


class TestTemperatureState:
    def test_two_users(self):
        state = TemperatureState(2, tau0=0.1, tau_min=1e-6, tau_max=10)
        update_user_loss_stats(state, np.array([0, 1, 1]), np.array([1.0, 3.0, 3.0]))
        assert state.m_u == pytest.approx(2.0)
        assert tau_user(state, 1) == pytest.approx(0.1 * math.exp(lambert_w(0.5)))
        assert tau_user(state, 0) < 0.1

    def test_unseen_users_keep_loss(self):
        state = TemperatureState(3, tau0=0.1)
        update_user_loss_stats(state, np.array([0, 1]), np.array([1.0, 2.0]))
        update_user_loss_stats(state, np.array([0]), np.array([4.0]))
        np.testing.assert_allclose(state.user_loss[:2], [4.0, 2.0])
        assert np.isnan(state.user_loss[2])
        assert state.m_u == pytest.approx(4.0)

    def test_sum_mode(self):
        state = TemperatureState(2, tau0=0.1, loss_mode="sum")
        update_user_loss_stats(state, np.array([0, 0, 1]), np.array([1.0, 2.0, 1.0]))
        np.testing.assert_allclose(state.user_loss, [3.0, 1.0])

    def test_large_beta_degenerates(self):
        state = TemperatureState(4, tau0=0.1, beta=1e9)
        update_user_loss_stats(state, np.arange(4), np.array([0.5, 2.0, 5.0, 9.0]))
        assert np.max(np.abs(state.tau_user - 0.1)) < 1e-6

    def test_validation(self):
        with pytest.raises(ValueError):
            TemperatureState(2, tau_min=0.5, tau_max=0.1)
        with pytest.raises(ValueError):
            TemperatureState(2, loss_mode="median")

    def test_no_warning_for_normal_update(self):
        state = TemperatureState(2, tau0=0.1)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            update_user_loss_stats(state, np.array([0, 1]), np.array([1.0, 2.0]))
