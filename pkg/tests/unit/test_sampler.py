import math

import numpy as np
import pytest
from scipy import optimize, stats

from rbayes.diagnostics import credible_lower_bound, mcse, rhat
from rbayes.errors import InitializationError
from rbayes.models import BetaModel
from rbayes.protocols import RB, Constant
from rbayes.qsim import NoiseModel, average_survival, depolarizing, overrotation, simulate_dataset
from rbayes.sampler import (
    PosteriorChains,
    Target,
    hmc_nuts,
    initial_point,
    kinetic_energy,
    leapfrog,
    metropolis_hastings,
    regularized_variance,
)
from rbayes.structs import DEFAULT_LENGTHS, DatasetRecord, PriorSpec, SamplerConfig

MEAN = np.array([1.0, -2.0])
SD = np.array([0.5, 2.0])
STATE_WEIGHTS = np.array([0.2, 0.3, 0.5])


def gaussian_target():
    return Target(
        lambda u: float(-0.5 * np.sum(((u - MEAN) / SD) ** 2)),
        2,
        grad=lambda u: -(u - MEAN) / SD**2,
        names=["x", "y"],
    )


def standard_normal_target(dim):
    return Target(lambda u: float(-0.5 * u @ u), dim, grad=lambda u: -u)


def three_state_target():
    """Piecewise-constant density on [0, 3): state k is the interval [k, k + 1)."""

    def log_density(u):
        if not 0 <= u[0] < 3:
            return -math.inf
        return math.log(STATE_WEIGHTS[int(u[0])])

    return Target(log_density, 1, init=np.array([1.5]))


def constant_records(counts, N=20):
    return [DatasetRecord(M=1, e="0", i=i, N=N, Q=q) for i, q in enumerate(counts)]


@pytest.mark.unit
class TestTarget:
    def test_default_names_and_constrain(self):
        target = Target(lambda u: 0.0, 3)
        assert target.names == ["u[0]", "u[1]", "u[2]"]
        draws = np.ones((2, 4, 3))
        assert target.constrain(draws) is draws

    def test_missing_gradient(self):
        target = Target(lambda u: 0.0, 1)
        with pytest.raises(InitializationError):
            hmc_nuts(target, SamplerConfig(chains=1, warmup=5, keep=5))

    def test_initial_point_gives_up(self, rng):
        target = Target(lambda u: -math.inf, 2)
        with pytest.raises(InitializationError):
            initial_point(target, rng, 0.1)

    def test_model_target_starts_at_prior_means(self, rng):
        priors = {"mu": PriorSpec.beta(9.0, 1.0)}
        model = BetaModel(Constant(), constant_records([9, 8]), priors, overdispersed=False)
        target = Target.from_model(model)
        assert model.constrain(target.init)["mu"] == pytest.approx(0.9)
        u, value = initial_point(target, rng, 1e-12)
        np.testing.assert_allclose(u, target.init, atol=1e-9)
        assert math.isfinite(value)

    def test_column_lookup(self):
        chains = PosteriorChains.from_columns(["a", "b"], np.zeros((2, 3, 2)))
        assert chains.column("b").shape == (2, 3)
        with pytest.raises(KeyError):
            chains.column("c")


@pytest.mark.unit
class TestMetropolisHastings:
    def test_recovers_gaussian(self):
        config = SamplerConfig(chains=2, warmup=2000, keep=8000, seed=5, proposal_scale=1.0)
        chains = metropolis_hastings(gaussian_target(), config=config)
        assert chains.draws.shape == (2, 8000, 2)
        assert np.mean(chains.column("x")) == pytest.approx(1.0, abs=0.1)
        assert np.std(chains.column("y")) == pytest.approx(2.0, rel=0.15)

    def test_same_seed_same_draws(self):
        config = SamplerConfig(chains=2, warmup=50, keep=100, seed=9)
        one = metropolis_hastings(gaussian_target(), config=config)
        two = metropolis_hastings(gaussian_target(), config=config, workers=2)
        np.testing.assert_array_equal(one.draws, two.draws)

    def test_bare_density_needs_dim(self):
        with pytest.raises(InitializationError):
            metropolis_hastings(lambda u: 0.0)

    def test_thinning_keeps_requested_draws(self):
        config = SamplerConfig(chains=1, warmup=10, keep=30, thin=3, seed=1)
        chains = metropolis_hastings(lambda u: float(-0.5 * u @ u), dim=2, config=config)
        assert chains.n_draws == 30


    def test_detailed_balance_on_three_states(self):
        config = SamplerConfig(chains=4, warmup=500, keep=20000, seed=13, proposal_scale=1.0)
        chains = metropolis_hastings(three_state_target(), config=config)
        states = np.floor(chains.column("u[0]")).astype(int)
        frequencies = np.bincount(states.ravel(), minlength=3) / states.size
        np.testing.assert_allclose(frequencies, STATE_WEIGHTS, atol=0.02)
        flow = np.zeros((3, 3))
        for chain in states:
            np.add.at(flow, (chain[:-1], chain[1:]), 1)
        for i, j in [(0, 1), (1, 2), (0, 2)]:
            assert flow[i, j] > 100
            assert abs(flow[i, j] - flow[j, i]) <= 4 * math.sqrt(flow[i, j] + flow[j, i])

    def test_acceptance_rises_as_proposals_shrink(self):
        accepts = []
        for scale in (3.0, 0.3, 0.01):
            config = SamplerConfig(chains=1, warmup=200, keep=3000, seed=2, proposal_scale=scale)
            accepts.append(metropolis_hastings(gaussian_target(), config=config).mean_accept)
        assert accepts == sorted(accepts)
        assert accepts[0] < 0.5
        assert accepts[-1] > 0.95

@pytest.mark.unit
class TestNuts:
    def test_leapfrog_is_reversible(self):
        target = gaussian_target()
        theta = np.array([0.3, 0.1])
        r = np.array([0.7, -1.2])
        inv_mass = np.ones(2)
        L, grad = target.value_and_grad(theta)
        t1, r1, _, g1 = leapfrog(target, theta, r, grad, 0.1, inv_mass)
        t2, r2, L2, _ = leapfrog(target, t1, -r1, g1, 0.1, inv_mass)
        np.testing.assert_allclose(t2, theta, atol=1e-12)
        np.testing.assert_allclose(-r2, r, atol=1e-12)
        assert L2 == pytest.approx(L)

    def test_leapfrog_energy_error_is_second_order(self):
        def energy_error(epsilon):
            target = gaussian_target()
            theta, r = np.array([0.3, 0.1]), np.array([0.7, -1.2])
            inv_mass = np.ones(2)
            L, grad = target.value_and_grad(theta)
            start = -L + kinetic_energy(r, inv_mass)
            # same trajectory time for every step size
            for _ in range(round(1.0 / epsilon)):
                theta, r, L, grad = leapfrog(target, theta, r, grad, epsilon, inv_mass)
            return abs(-L + kinetic_energy(r, inv_mass) - start)

        assert energy_error(0.1) / energy_error(0.05) == pytest.approx(4.0, abs=0.5)

    def test_recovers_gaussian(self):
        config = SamplerConfig(chains=2, warmup=500, keep=1500, seed=3)
        chains = hmc_nuts(gaussian_target(), config=config)
        assert np.mean(chains.column("x")) == pytest.approx(1.0, abs=0.08)
        assert np.mean(chains.column("y")) == pytest.approx(-2.0, abs=0.3)
        assert np.std(chains.column("y")) == pytest.approx(2.0, rel=0.15)
        assert chains.divergences == 0
        assert len(chains.step_size) == 2

    def test_same_seed_same_draws(self):
        config = SamplerConfig(chains=2, warmup=40, keep=40, seed=21)
        one = hmc_nuts(gaussian_target(), config=config)
        two = hmc_nuts(gaussian_target(), config=config, workers=2)
        np.testing.assert_array_equal(one.draws, two.draws)

    def test_regularized_variance_shrinks(self):
        samples = np.random.default_rng(0).normal(0, 3, size=(15, 2))
        var = regularized_variance(samples)
        raw = np.var(samples, axis=0, ddof=1)
        assert np.all(var < raw)
        assert np.all(var > 0)

    @pytest.mark.slow
    def test_conjugate_posterior(self, quick_sampler):
        # flat prior, 21 of 30 shots -> Beta(22, 10)
        records = [DatasetRecord(M=1, e="0", i=i, N=10, Q=q) for i, q in enumerate([7, 8, 6])]
        model = BetaModel(Constant(), records, overdispersed=False)
        config = quick_sampler.model_copy(update={"warmup": 500, "keep": 2000})
        chains = hmc_nuts(model, config=config)
        mu = chains.column("mu")
        assert np.mean(mu) == pytest.approx(22 / 32, abs=0.01)
        assert np.std(mu) == pytest.approx(math.sqrt(220 / (32**2 * 33)), rel=0.1)


@pytest.mark.unit
@pytest.mark.slow
class TestPosteriorAccuracy:
    @pytest.mark.parametrize("method", ["nuts", "mh"])
    def test_conjugate_draws_follow_the_beta_cdf(self, method):
        model = BetaModel(Constant(), constant_records([7, 8, 6], N=10), overdispersed=False)
        if method == "nuts":
            chains = hmc_nuts(model, SamplerConfig(chains=4, warmup=500, keep=2000, seed=8))
        else:
            config = SamplerConfig(chains=4, warmup=1000, keep=4000, thin=5, seed=8, proposal_scale=1.0)
            chains = metropolis_hastings(model, config=config)
        distance = stats.kstest(np.ravel(chains.column("mu")), stats.beta(22, 10).cdf).statistic
        assert distance < 0.03

    def test_nuts_on_fifty_dimensional_normal(self):
        config = SamplerConfig(chains=4, warmup=500, keep=1000, seed=17)
        chains = hmc_nuts(standard_normal_target(50), config=config)
        means = chains.draws.mean(axis=(0, 1))
        assert np.max(np.abs(means)) < 0.1
        assert max(rhat(chains.column(name)) for name in chains.names) < 1.02
        assert chains.mean_accept == pytest.approx(0.8, abs=0.1)
        assert chains.divergences == 0

    def test_nuts_and_mh_agree(self):
        records = constant_records([12, 18, 15, 9, 17, 14, 19, 11])
        model = BetaModel(Constant(), records)
        nuts = hmc_nuts(model, SamplerConfig(chains=4, warmup=500, keep=1000, seed=4))
        mh_config = SamplerConfig(chains=4, warmup=2000, keep=5000, thin=2, seed=4, proposal_scale=0.5)
        mh = metropolis_hastings(model, config=mh_config)
        for name in ["mu", "t[1,0]"]:
            a, b = nuts.column(name), mh.column(name)
            tolerance = 3 * math.hypot(mcse(a), mcse(b))
            assert abs(np.mean(a) - np.mean(b)) < tolerance

    def test_depolarizing_posterior_covers_true_decay(self):
        rb = RB()
        noise = NoiseModel.gate_independent(depolarizing(0.0002))
        records = simulate_dataset(rb, noise, rb.default_spam(), DEFAULT_LENGTHS, I=20, N=30, seed=71)
        chains = hmc_nuts(BetaModel(rb, records), SamplerConfig(chains=2, warmup=400, keep=600, seed=71))
        lo, hi = np.quantile(chains.column("p"), [0.005, 0.995])
        assert lo < 0.9998 < hi

    def test_overrotation_lower_bound_coverage(self):
        rb = RB()
        noise = NoiseModel.gate_dependent([overrotation(g, 0.11132) for g in rb.gateset.gates])
        spam = rb.default_spam()
        lengths = [1, 100, 500, 1000, 2500, 5000]
        means = [average_survival(rb, noise, spam["0"], M, "0") for M in lengths]

        def decay(M, p, a, b):
            return a * p**M + b

        M = np.asarray(lengths, dtype=float)
        (p_true, _, _), _ = optimize.curve_fit(decay, M, means, p0=(0.9998, 0.5, 0.5))
        covered = 0
        for seed in range(100):
            records = simulate_dataset(rb, noise, spam, lengths, I=10, N=5, seed=seed, workers=1)
            config = SamplerConfig(chains=2, warmup=200, keep=300, seed=seed)
            chains = hmc_nuts(BetaModel(rb, records), config, workers=1)
            covered += credible_lower_bound(chains.column("p"), 0.95) < p_true
        assert covered >= 90
