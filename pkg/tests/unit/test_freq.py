from collections import Counter

import numpy as np
import pytest
from scipy import optimize

from rbayes import freq
from rbayes.errors import ConfigError, FitError
from rbayes.freq import bootstrap, cell_statistics, group_by_cell, mle_fit, mle_loglik, wlsf_fit
from rbayes.protocols import Constant
from rbayes.structs import BootstrapKind, DatasetRecord


@pytest.mark.unit
class TestMle:
    def test_recovers_decay(self, rb, rb_records):
        fit = mle_fit(rb, rb_records, seed=1)
        assert fit.method == "mle"
        assert fit.params["p"] == pytest.approx(0.98, abs=0.01)
        assert fit.loglik >= fit.loglik_init
        assert set(fit.params) == {"p", "A", "B"}

    def test_constant_model_matches_closed_form(self):
        # identical cells: the beta MLE of the shared mean is the pooled fraction
        records = [DatasetRecord(M=1, e="0", i=i, N=10, Q=q) for i, q in enumerate([7, 7, 7, 7])]
        fit = mle_fit(Constant(), records, n_starts=3)
        assert fit.params["mu"] == pytest.approx(0.7, abs=1e-3)

    def test_profile_loglik_peaks_at_mle(self, rb, rb_records):
        fit = mle_fit(rb, rb_records, seed=1)
        at_mle = mle_loglik(rb, rb_records, fit.params)
        moved = dict(fit.params, p=fit.params["p"] - 0.01)
        assert at_mle >= mle_loglik(rb, rb_records, moved)
        assert at_mle <= fit.loglik + 1e-6

    def test_beats_the_least_squares_fit(self, rb, rb_records):
        fit = mle_fit(rb, rb_records, seed=1)
        wlsf = wlsf_fit(rb, rb_records)
        assert fit.loglik >= mle_loglik(rb, rb_records, wlsf.params) - 1e-6

    def test_rejected_optimizer_step_is_not_converged(self, rb, rb_records, monkeypatch):
        # an optimizer that claims success at a worse point than its start
        def worse(fun, x0, **kwargs):
            return optimize.OptimizeResult(x=x0 + 3.0, fun=fun(x0) + 10.0, success=True, message="ok")

        monkeypatch.setattr(freq.optimize, "minimize", worse)
        fit = mle_fit(rb, rb_records, n_starts=2)
        assert not fit.converged
        assert "kept start" in fit.status
        assert fit.loglik == pytest.approx(fit.loglik_init)

    def test_rejects_nv_records(self, rb):
        with pytest.raises(ConfigError):
            mle_fit(rb, [DatasetRecord(M=1, e="0", i=0, X=5, Y=30, Z=20)])


@pytest.mark.unit
class TestWlsf:
    def test_recovers_decay(self, rb, rb_records):
        fit = wlsf_fit(rb, rb_records)
        assert fit.method == "wlsf"
        assert fit.params["p"] == pytest.approx(0.98, abs=0.015)
        assert fit.standard_errors["p"] > 0
        assert "mean[1,0]" in fit.nuisances

    def test_needs_two_lengths(self, rb):
        records = [DatasetRecord(M=5, e="0", i=i, N=10, Q=q) for i, q in enumerate([6, 8])]
        with pytest.raises(FitError):
            wlsf_fit(rb, records)

    def test_zero_variance_everywhere(self, rb):
        records = [DatasetRecord(M=M, e="0", i=i, N=10, Q=9) for M in (1, 5) for i in range(3)]
        with pytest.raises(FitError):
            wlsf_fit(rb, records)


@pytest.mark.unit
class TestCellStatistics:
    def test_first_and_second_moment(self, handmade_records):
        first = cell_statistics(handmade_records)
        mean, var, I = first[(1, "0")]
        assert I == 3
        assert mean == pytest.approx(57 / 60)
        assert var == pytest.approx(np.var([19 / 20, 1.0, 18 / 20], ddof=1))
        second = cell_statistics(handmade_records, moment=2)
        assert second[(40, "0")][0] == pytest.approx(np.mean([9 * 8, 12 * 11, 10 * 9]) / 380)

    def test_grouping(self, handmade_records):
        cells = group_by_cell(handmade_records)
        assert sorted(cells) == [(1, "0"), (10, "0"), (40, "0")]


@pytest.mark.unit
class TestBootstrap:
    def test_too_few_replicates(self, rb, rb_records):
        with pytest.raises(ConfigError):
            bootstrap(rb, rb_records, B=50)

    def test_nonparametric_resample_keeps_cell_sizes(self, rb_records, rng):
        resampled = freq._resample_nonparametric(rb_records, rng)
        original = group_by_cell(rb_records)
        for cell, recs in group_by_cell(resampled).items():
            assert [r.i for r in recs] == list(range(len(original[cell])))
            pool = {r.N for r in original[cell]}
            assert all(r.N in pool for r in recs)
        assert Counter(r.cell for r in resampled) == Counter(r.cell for r in rb_records)

    def test_parametric_resample_keeps_layout(self, rb, rb_records, rng):
        fit = mle_fit(rb, rb_records, seed=1)
        resampled = freq._resample_parametric(rb, rb_records, fit, rng)
        layout = sorted((r.M, r.e, r.i, r.N) for r in rb_records)
        assert sorted((r.M, r.e, r.i, r.N) for r in resampled) == layout
        assert all(0 <= r.Q <= r.N for r in resampled)

    @pytest.mark.slow
    @pytest.mark.parametrize("kind", list(BootstrapKind))
    def test_intervals_cover_point(self, kind, rb, rb_records):
        fit = mle_fit(rb, rb_records, seed=1)
        out = bootstrap(rb, rb_records, kind=kind, B=100, seed=2, fit=fit, alpha_levels=(0.95, 0.5))
        assert out.estimates.shape[1] == 3
        assert out.failures + out.estimates.shape[0] == 100
        lo, hi = out.intervals[0.95]["p"]
        assert lo <= fit.params["p"] <= hi
        assert out.lower_bounds[0.95]["p"] <= out.lower_bounds[0.5]["p"]
        assert list(out.frame().columns) == ["p", "A", "B"]
