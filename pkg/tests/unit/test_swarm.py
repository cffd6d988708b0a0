import threading

import pytest

from rbayes.swarm import MAX_DEFAULT_WORKERS, Swarm, get_worker_count


@pytest.mark.unit
class TestWorkerCount:
    def test_override_wins(self, monkeypatch):
        monkeypatch.setenv("RBAYES_THREADS", "3")
        assert get_worker_count(5) == 5
        assert get_worker_count(0) == 1

    def test_environment(self, monkeypatch):
        monkeypatch.setenv("RBAYES_THREADS", "3")
        assert get_worker_count() == 3

    @pytest.mark.parametrize("value", ["", "many"])
    def test_default_is_bounded(self, monkeypatch, value):
        monkeypatch.setenv("RBAYES_THREADS", value)
        assert 1 <= get_worker_count() <= MAX_DEFAULT_WORKERS


@pytest.mark.unit
class TestSwarm:
    @pytest.mark.parametrize("workers", [1, 3, 8])
    def test_results_keep_job_order(self, workers):
        jobs = [lambda k=k: k * k for k in range(10)]
        assert Swarm(jobs, workers).main() == [k * k for k in range(10)]

    def test_never_more_threads_than_jobs(self):
        swarm = Swarm([lambda: 1, lambda: 2], workers=6)
        assert swarm.workers == 2

    def test_runs_on_several_threads(self):
        seen = set()
        barrier = threading.Barrier(2, timeout=5)

        def job():
            seen.add(threading.get_ident())
            barrier.wait()
            return True

        assert Swarm([job, job], workers=2).main() == [True, True]
        assert len(seen) == 2

    def test_failure_raises_first_error(self):
        def bad():
            raise ValueError("boom")

        with pytest.raises(ValueError, match="boom"):
            Swarm([lambda: 1, bad], workers=2).main()

    def test_failures_can_be_collected(self):
        def bad():
            raise RuntimeError("refit failed")

        swarm = Swarm([lambda: 1, bad, lambda: 3], workers=1, label="replicate")
        assert swarm.main(raise_errors=False) == [1, None, 3]
        assert swarm.failures == 1
