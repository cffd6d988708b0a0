import math

import numpy as np
import pytest
from scipy import integrate, optimize, special, stats

from rbayes import dists
from rbayes.dists import BetaParams, BetaView, PALParams
from rbayes.errors import DomainError


@pytest.mark.unit
class TestBetaViews:
    def test_mean_t(self):
        alpha, beta = BetaParams(view=BetaView.MEAN_T, a=0.3, b=0.2).alpha_beta()
        assert alpha == pytest.approx(1.2)
        assert beta == pytest.approx(2.8)

    @pytest.mark.parametrize("view", list(BetaView))
    def test_every_view_describes_the_same_beta(self, view):
        base = BetaParams(view=BetaView.ALPHA_BETA, a=2.5, b=4.0)
        converted = dists.beta_convert(base, view)
        assert converted.alpha_beta() == pytest.approx((2.5, 4.0))
        assert converted.mean == pytest.approx(2.5 / 6.5)

    def test_box_violation(self):
        with pytest.raises(ValueError):
            BetaParams(view=BetaView.MEAN_VARIANCE, a=0.5, b=0.3)


@pytest.mark.unit
class TestBetaBinomial:
    def test_matches_scipy(self):
        Q = np.arange(11)
        ours = dists.beta_binomial_logpmf(Q, 10, 0.3, 0.2)
        np.testing.assert_allclose(ours, stats.betabinom.logpmf(Q, 10, 1.2, 2.8), rtol=1e-12)

    def test_zero_dispersion_is_binomial(self):
        Q = np.arange(6)
        ours = dists.beta_binomial_logpmf(Q, 5, 0.7, 0.0)
        np.testing.assert_allclose(ours, stats.binom.logpmf(Q, 5, 0.7), rtol=1e-12)

    def test_single_shot_ignores_dispersion(self):
        for t in (0.0, 0.3, 0.9):
            assert math.exp(dists.beta_binomial_logpmf(1, 1, 0.8, t)) == pytest.approx(0.8)

    @pytest.mark.parametrize("order", [1, 2, 3, 4])
    def test_moments_match_scipy(self, order):
        mu, t, N = 0.7, 0.1, 12
        mu2 = mu * mu + t * mu * (1 - mu)
        a, b = mu * (1 / t - 1), (1 - mu) * (1 / t - 1)
        expected = stats.betabinom(N, a, b).moment(order)
        assert dists.beta_binomial_moment(order, N, mu, mu2) == pytest.approx(expected, rel=1e-10)

    def test_moment_box(self):
        with pytest.raises(DomainError):
            dists.beta_binomial_moment(2, 10, 0.5, 0.6)

    def test_invalid_counts(self):
        with pytest.raises(DomainError):
            dists.beta_binomial_logpmf(4, 3, 0.5, 0.1)


@pytest.mark.unit
class TestPAL:
    @pytest.mark.parametrize("smooth", [False, True])
    def test_mass_below_threshold(self, smooth):
        params = PALParams(p0=0.9, z=0.05, smooth=smooth)
        density = lambda x: math.exp(float(dists.pal_logpdf(x, params)))  # noqa: E731
        below, _ = integrate.quad(density, 0, 0.9, limit=200)
        above, _ = integrate.quad(density, 0.9, 1)
        assert below == pytest.approx(0.05, abs=1e-5)
        assert below + above == pytest.approx(1.0, abs=1e-5)

    @pytest.mark.parametrize("smooth", [False, True])
    def test_mean_matches_quadrature(self, smooth):
        params = PALParams(p0=0.9, z=0.05, smooth=smooth)
        density = lambda x: x * math.exp(float(dists.pal_logpdf(x, params)))  # noqa: E731
        below, _ = integrate.quad(density, 0, 0.9, limit=200)
        above, _ = integrate.quad(density, 0.9, 1)
        assert dists.pal_mean(params) == pytest.approx(below + above, abs=1e-6)

    def test_smoothed_density_is_continuous_at_threshold(self):
        params = PALParams(p0=0.9, z=0.05, smooth=True)
        left = float(dists.pal_logpdf(0.9 - 1e-7, params))
        right = float(dists.pal_logpdf(0.9 + 1e-7, params))
        assert left == pytest.approx(right, abs=1e-5)

    def test_invalid(self):
        with pytest.raises(ValueError):
            PALParams(p0=0.5, z=0.6)


@pytest.mark.unit
class TestMixtures:
    def test_stick_break_on_simplex(self):
        w = dists.stick_break([0.3, 0.5, 0.2])
        assert w.sum() == pytest.approx(1.0)
        assert w[0] == pytest.approx(0.3)
        assert w[1] == pytest.approx(0.35)
        with pytest.raises(DomainError):
            dists.stick_break([0.3, 1.0])

    def test_mean_constraint(self):
        w = np.array([0.2, 0.5, 0.3])
        nu = dists.cdpbm_constrain_mean([-2.0, 0.0, 3.0], w, 0.93)
        assert float(np.dot(w, nu)) == pytest.approx(0.93, abs=1e-10)

    def test_mean_constraint_matches_bisection(self, rng):
        for _ in range(100):
            nu_star = 2.0 * rng.standard_normal(10)
            w = rng.dirichlet(np.ones(10))
            mu1 = rng.uniform(0.05, 0.95)
            shift = optimize.brentq(
                lambda h: np.dot(w, special.expit(nu_star + h)) - mu1, -60, 60, xtol=1e-14
            )
            nu = dists.cdpbm_constrain_mean(nu_star, w, mu1)
            assert abs(float(np.dot(w, nu)) - mu1) < 1e-10
            np.testing.assert_allclose(nu, special.expit(nu_star + shift), atol=1e-9)

    def test_two_moment_constraint(self):
        w = np.array([0.3, 0.4, 0.3])
        r = np.full(3, 0.1)
        mix = dists.cdpbm_constrain_two_moments([-1.0, 0.0, 1.0], r, w, 0.6, 0.38)
        assert dists.mixture_moment(1, mix) == pytest.approx(0.6, abs=1e-7)
        assert dists.mixture_moment(2, mix) == pytest.approx(0.38, abs=1e-7)

    def test_single_component_solves_spread(self):
        mix = dists.cdpbm_constrain_two_moments([0.0], [0.5], [1.0], 0.6, 0.37)
        assert mix.nu[0] == pytest.approx(0.6)
        assert dists.mixture_moment(2, mix) == pytest.approx(0.37)

    def test_effective_components(self):
        mix = dists.BetaMixture(weights=[0.5, 0.5], nu=[0.3, 0.8], r=[0.2, 0.2])
        assert mix.effective_components == pytest.approx(2.0)
        density, _ = integrate.quad(lambda x: math.exp(float(dists.mixture_logpdf(x, mix))), 0, 1)
        assert density == pytest.approx(1.0, abs=1e-6)
