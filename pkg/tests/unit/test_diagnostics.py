import json

import numpy as np
import pytest

from rbayes.diagnostics import (
    credible_lower_bound,
    diagnostics,
    ess,
    mcse,
    rhat,
    summarize,
    summary_frame,
)
from rbayes.sampler import PosteriorChains


def iid_chains(rng, chains=4, draws=1000, shift=None):
    ary = rng.standard_normal((chains, draws))
    if shift is not None:
        ary = ary + np.asarray(shift)[:, None]
    return ary


@pytest.mark.unit
class TestRhat:
    def test_well_mixed(self, rng):
        assert rhat(iid_chains(rng)) < 1.01

    def test_stuck_chain(self, rng):
        assert rhat(iid_chains(rng, shift=[0.0, 0.0, 0.0, 4.0])) > 1.1

    def test_trend_within_chain_is_caught_by_splitting(self, rng):
        trend = np.linspace(-3, 3, 1000)
        ary = rng.standard_normal((2, 1000)) * 0.1 + trend
        assert rhat(ary) > 1.1

    def test_needs_two_chains(self, rng):
        assert np.isnan(rhat(iid_chains(rng, chains=1)))

    def test_too_few_draws(self, rng):
        assert np.isnan(rhat(iid_chains(rng, draws=3)))


@pytest.mark.unit
class TestEss:
    def test_iid_draws(self, rng):
        assert ess(iid_chains(rng)) == pytest.approx(4000, rel=0.15)

    def test_autocorrelated_draws(self, rng):
        ary = np.empty((2, 2000))
        ary[:, 0] = 0.0
        noise = rng.standard_normal((2, 2000))
        for k in range(1, 2000):
            ary[:, k] = 0.9 * ary[:, k - 1] + noise[:, k]
        # AR(1) with rho = 0.9 has tau = (1 + rho) / (1 - rho) = 19
        assert ess(ary) == pytest.approx(4000 / 19, rel=0.35)

    def test_constant_draws(self):
        assert np.isnan(ess(np.ones((2, 50))))


@pytest.mark.unit
class TestMcse:
    def test_iid_draws(self, rng):
        assert mcse(iid_chains(rng)) == pytest.approx(1 / np.sqrt(4000), rel=0.15)

    def test_scales_linearly(self, rng):
        ary = 3.0 * iid_chains(rng)
        assert mcse(ary) == pytest.approx(3.0 * mcse(ary / 3.0))

    def test_constant_draws(self):
        assert np.isnan(mcse(np.full((2, 50), 0.5)))


@pytest.mark.unit
class TestReport:
    def test_flags_stuck_parameter(self, rng):
        good = iid_chains(rng)
        bad = iid_chains(rng, shift=[0.0, 0.0, 0.0, 5.0])
        chains = PosteriorChains.from_columns(["good", "bad"], np.stack([good, bad], axis=-1))
        report = diagnostics(chains)
        assert report.flagged == ["bad"]
        assert report.warnings
        assert report.max_rhat == report.get("bad").rhat

    def test_single_chain_notice(self, rng):
        chains = PosteriorChains.from_columns(["x"], iid_chains(rng, chains=1)[..., None])
        report = diagnostics(chains)
        assert report.get("x").rhat is None
        assert report.get("x").ess is not None
        assert any("two chains" in n for n in report.notices)

    def test_constant_quantity_is_degenerate(self, rng):
        draws = np.stack([iid_chains(rng), np.full((4, 1000), 0.5)], axis=-1)
        report = diagnostics(PosteriorChains.from_columns(["x", "fixed"], draws))
        assert report.get("fixed").degenerate
        # NaN never reaches the JSON
        payload = json.loads(report.to_json())
        assert payload["params"][1]["ess"] is None


@pytest.mark.unit
class TestSummary:
    def test_lower_bound(self):
        draws = np.linspace(0, 1, 10001)
        assert credible_lower_bound(draws, 0.95) == pytest.approx(0.05)

    def test_summarize(self, rng):
        draws = 0.9 + 0.01 * iid_chains(rng)
        chains = PosteriorChains.from_columns(["p"], draws[..., None])
        (row,) = summarize(chains, alpha_levels=(0.95, 0.5))
        assert row.mean == pytest.approx(0.9, abs=0.001)
        lo, hi = row.intervals[0.95]
        assert lo < row.lower_bounds[0.95] < row.mean < hi
        assert row.lower_bounds[0.5] == pytest.approx(np.median(draws), abs=1e-3)
        assert row.mcse is not None and row.mcse < 0.001

    def test_frame_columns(self, rng):
        draws = iid_chains(rng, draws=100)[..., None].repeat(2, -1)
        chains = PosteriorChains.from_columns(["p", "A"], draws)
        frame = summary_frame(summarize(chains, alpha_levels=(0.95,)))
        assert list(frame.index) == ["p", "A"]
        assert {"mean", "sd", "rhat", "ess", "ci0.95_lo", "ci0.95_hi", "p_0.95"} <= set(frame.columns)
