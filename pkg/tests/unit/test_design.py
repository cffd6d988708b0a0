import numpy as np
import pytest
from scipy import special, stats

from rbayes import design
from rbayes.errors import DomainError
from rbayes.structs import BagParams, CostModel


def score_outer_product(qbar, t, N):
    """E[s sᵀ] of the (qbar, t) score, summed over Q = 0..N."""
    s = 1 / t - 1
    a, b = qbar * s, (1 - qbar) * s
    Q = np.arange(N + 1)
    pmf = stats.betabinom.pmf(Q, N, a, b)
    common = special.digamma(a + b) - special.digamma(N + a + b)
    score_a = special.digamma(Q + a) - special.digamma(a) + common
    score_b = special.digamma(N - Q + b) - special.digamma(b) + common
    jac = np.array([[s, -qbar / t**2], [-s, -(1 - qbar) / t**2]])
    scores = np.stack([score_a, score_b], axis=1) @ jac
    return (scores * pmf[:, None]).T @ scores


@pytest.mark.unit
class TestFisherInformation:
    def test_single_shot_is_bernoulli(self):
        info = design.fisher_info_betabin(0.3, 0.2, 1)
        assert info[0, 0] == pytest.approx(1 / (0.3 * 0.7))
        assert info[1, 1] == pytest.approx(0.0, abs=1e-9)

    def test_vanishing_dispersion_is_binomial(self):
        info = design.fisher_info_betabin(0.3, 1e-6, 10)
        assert info[0, 0] == pytest.approx(10 / (0.3 * 0.7), rel=1e-3)

    def test_symmetric_point_decouples(self):
        info = design.fisher_info_betabin(0.5, 0.3, 12)
        assert info[0, 1] == pytest.approx(0.0, abs=1e-9)
        assert info[0, 1] == pytest.approx(info[1, 0])

    def test_off_diagonal_away_from_symmetry(self):
        info = design.fisher_info_betabin(0.3, 0.2, 10)
        assert abs(info[0, 1]) > 1e-3
        assert info[0, 1] == pytest.approx(score_outer_product(0.3, 0.2, 10)[0, 1], rel=1e-6)

    def test_matches_outer_product_of_scores(self, rng):
        for _ in range(20):
            qbar, t = rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.9)
            N = int(rng.integers(1, 51))
            expected = score_outer_product(qbar, t, N)
            np.testing.assert_allclose(
                design.fisher_info_betabin(qbar, t, N),
                expected,
                rtol=1e-6,
                atol=1e-8 * np.abs(expected).max(),
            )

    def test_information_saturates_with_dispersion(self):
        # with t > 0 more shots per sequence cannot beat I_1 / t
        limit = 1 / (0.4 * 0.6 * 0.25)
        values = [design.fisher_info_betabin(0.4, 0.25, N)[0, 0] for N in (1, 5, 50, 400)]
        assert values == sorted(values)
        assert values[-1] < limit

    def test_rejects_degenerate_inputs(self):
        with pytest.raises(DomainError):
            design.fisher_info_betabin(0.5, 0.0, 3)
        with pytest.raises(DomainError):
            design.fisher_info_betabin(1.0, 0.2, 3)


@pytest.mark.unit
class TestFirstMomentPlan:
    def test_free_sequence_changes_mean_single_shot(self):
        assert design.wcrb_argmin(0.5, 0.5, CostModel(t_pick=0, t_flip=1), 50) == 1

    def test_expensive_sequence_changes_reuse_them(self):
        cost = CostModel(t_pick=50, t_flip=1)
        assert cost.tau == 50
        assert design.wcrb_argmin(0.5, 0.5, cost, 200) > 1

    def test_curve_frame(self):
        curve = design.wcrb_curve(0.9, 0.1, CostModel(t_pick=1, t_flip=1), 10)
        assert list(curve.columns) == ["N", "wcrb"]
        assert curve["N"].tolist() == list(range(1, 11))

    def test_mean_estimator_variance(self):
        bag = BagParams(qbar=0.8, t=0.1)
        assert design.mean_estimator_variance(bag, 1, 10) == pytest.approx(0.016)
        assert design.mean_estimator_variance(bag, 100, 10) == pytest.approx(
            (0.16 / 100 + 0.99 * 0.016) / 10
        )


@pytest.mark.unit
class TestSecondMomentPlan:
    def test_mse_of_plugin_estimator(self):
        # N = 1: Q² = Q so the estimator has bias qbar - mu2
        mse = design.second_moment_mse(0.7, 0.55, 1, 4)
        assert mse == pytest.approx(0.15**2 + 0.7 * 0.3 / 4)

    def test_prior_grid_is_normalized(self):
        grid = design.PriorGrid.build(0.5, nodes=16)
        assert grid.weight.sum() == pytest.approx(1.0)
        assert np.all(grid.mu > 0.5)
        assert np.all(grid.mu2 <= grid.mu + 1e-15)
        assert np.all(grid.mu2 >= grid.mu**2 - 1e-15)

    def test_asymptotic_coefficient(self):
        assert design.EXACT_COEFFICIENT == pytest.approx(0.648, abs=1e-3)
        exact = design.EXACT_COEFFICIENT
        assert design.asymptotic_n_opt_coefficient() == pytest.approx(exact, abs=0.02)
        assert design.asymptotic_n_opt_coefficient(0.9) == pytest.approx(0.39, abs=0.02)

    def test_optimal_N_for_moderate_budget(self):
        plan = design.optimal_N_second_moment(8000)
        assert abs(plan.n_opt - 13) <= 1
        assert plan.exact_coefficient == pytest.approx(design.EXACT_COEFFICIENT)
        assert plan.sequences == pytest.approx(8000 / plan.n_opt)
        assert list(plan.frame().columns) == ["N", "objective"]

    def test_overhead_pushes_reuse_up(self):
        cheap = design.optimal_N_second_moment(2000)
        costly = design.optimal_N_second_moment(2000, tau=100)
        assert costly.n_opt >= cheap.n_opt

    def test_budget_too_small(self):
        with pytest.raises(DomainError):
            design.optimal_N_second_moment(1)
