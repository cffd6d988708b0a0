import json

import pandas as pd
import pytest

from rbayes.cli import EXIT_OK, EXIT_USER_ERROR, build_parser, config_from_args, run
from rbayes.recorder import Recorder
from rbayes.structs import FitMethod, NoiseKind

SIMULATE = [
    "simulate",
    "--noise", "depolarizing:0.02",
    "--lengths", "1,5,20,60",
    "--sequences", "6",
    "--shots", "30",
    "--seed", "4",
]  # fmt: skip


def parse(argv):
    return config_from_args(build_parser().parse_args(argv))


@pytest.mark.unit
class TestConfig:
    def test_flags_fill_run_config(self, tmp_path):
        config = parse(SIMULATE + ["--out-dir", str(tmp_path)])
        assert config.noise.kind == NoiseKind.DEPOLARIZING
        assert config.lengths == [1, 5, 20, 60]
        assert config.sampler.seed == 4

    def test_sampler_flags(self):
        config = parse(["fit", "--method", "nuts", "--chains", "2", "--draws", "50"])
        assert config.method == FitMethod.NUTS
        assert config.sampler.chains == 2
        assert config.sampler.keep == 50

    def test_flags_override_config_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"command": "fit", "seed": 3, "sampler": {"chains": 3}}))
        config = parse(["fit", "--config", str(path), "--warmup", "10"])
        assert config.sampler.chains == 3
        assert config.sampler.warmup == 10
        assert config.seed == 3

    def test_bad_noise_spec(self):
        with pytest.raises(ValueError):
            parse(["simulate", "--noise", "depolarizing:0.1,0.2"])


@pytest.mark.integration
class TestCommands:
    def test_simulate_writes_dataset(self, tmp_path):
        assert run(SIMULATE + ["--out-dir", str(tmp_path)]) == EXIT_OK
        records = Recorder(str(tmp_path / "dataset.jsonl")).get()
        assert len(records) == 24
        assert (tmp_path / "run_config.json").exists()

    def test_auto_lengths(self, tmp_path):
        argv = ["simulate", "--noise", "depolarizing:0.02", "--auto-mmax", "--out-dir", str(tmp_path)]
        assert run(argv) == EXIT_OK
        lengths = {r.M for r in Recorder(str(tmp_path / "dataset.jsonl")).get()}
        # F = 0.99 -> M_max = 1/(1 - F), up to rounding of F
        assert min(lengths) == 1 and max(lengths) in (100, 101)

    @pytest.mark.parametrize("method", ["wlsf", "mle"])
    def test_frequentist_fit(self, tmp_path, method):
        run(SIMULATE + ["--out-dir", str(tmp_path)])
        code = run(["fit", "--method", method, "--out-dir", str(tmp_path)])
        assert code in (0, 1)
        fit = json.loads((tmp_path / "fit.json").read_text())
        assert fit["method"] == method
        assert 0.9 < fit["params"]["p"] < 1

    @pytest.mark.slow
    @pytest.mark.parametrize("method", ["mh", "nuts"])
    def test_bayesian_fit_then_diagnose(self, tmp_path, method):
        run(SIMULATE + ["--out-dir", str(tmp_path)])
        code = run(
            ["fit", "--method", method, "--chains", "2", "--warmup", "150", "--draws", "150"]
            + ["--out-dir", str(tmp_path)]
        )
        assert code in (0, 1)
        summary = pd.read_csv(tmp_path / "summary.csv", index_col=0)
        assert {"p", "A", "B", "t[1,0]"} <= set(summary.index)
        assert "p_0.95" in summary.columns

        diag_dir = tmp_path / "diag"
        code = run(["diagnose", "--input", str(tmp_path / "chains.csv"), "--out-dir", str(diag_dir)])
        assert code in (0, 1)
        envelopes = pd.read_csv(diag_dir / "survival_envelopes.csv")
        assert set(envelopes["M"]) == {1, 5, 20, 60}
        assert (envelopes["lo"] <= envelopes["hi"]).all()

    def test_plan_first_moment(self, tmp_path):
        argv = ["plan", "--moment", "1", "--qbar", "0.5", "--t", "0.5"]
        argv += ["--t-pick", "50", "--t-flip", "1", "--n-max", "100", "--out-dir", str(tmp_path)]
        assert run(argv) == EXIT_OK
        plan = json.loads((tmp_path / "plan.json").read_text())
        assert plan["n_opt"] > 1
        assert len(pd.read_csv(tmp_path / "plan.csv")) == 100

    def test_plan_second_moment(self, tmp_path):
        argv = ["plan", "--moment", "2", "--budget", "8000", "--out-dir", str(tmp_path)]
        assert run(argv) == EXIT_OK
        plan = json.loads((tmp_path / "plan.json").read_text())
        assert abs(plan["n_opt"] - 13) <= 1


@pytest.mark.integration
class TestUserErrors:
    def test_unknown_command(self):
        assert run(["explode"]) == EXIT_USER_ERROR

    def test_missing_config_file(self, tmp_path):
        assert run(["fit", "--config", str(tmp_path / "nope.json")]) == EXIT_USER_ERROR

    def test_invalid_config_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text('{"sampler": {"chains": 0}}')
        assert run(["fit", "--config", str(path), "--out-dir", str(tmp_path)]) == EXIT_USER_ERROR

    def test_missing_dataset(self, tmp_path):
        assert run(["fit", "--method", "mle", "--out-dir", str(tmp_path)]) == EXIT_USER_ERROR

    def test_cost_model_with_no_cost(self, tmp_path):
        argv = ["plan", "--moment", "1", "--t-pick", "0", "--t-flip", "0", "--out-dir", str(tmp_path)]
        assert run(argv) == EXIT_USER_ERROR

    def test_too_few_replicates(self, tmp_path):
        run(SIMULATE + ["--out-dir", str(tmp_path)])
        argv = ["fit", "--method", "bootstrap", "--replicates", "10", "--out-dir", str(tmp_path)]
        assert run(argv) == EXIT_USER_ERROR
