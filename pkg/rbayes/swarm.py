from __future__ import annotations

import logging
import os
from threading import Thread
from typing import Callable, Generic, Optional, TypeVar

logger = logging.getLogger()

T = TypeVar("T")

MAX_DEFAULT_WORKERS = 8


def get_worker_count(override: Optional[int] = None) -> int:
    """Worker cap from the override, else RBAYES_THREADS, else the CPU count."""
    if override is not None:
        return max(1, override)
    env = os.environ.get("RBAYES_THREADS", "")
    if env.strip():
        try:
            return max(1, int(env))
        except ValueError:
            logger.warning(f"ignoring non-integer RBAYES_THREADS={env!r}")
    return max(1, min(os.cpu_count() or 1, MAX_DEFAULT_WORKERS))


class Swarm(Generic[T]):
    """Runs independent jobs on a bounded set of threads.

    Job k goes to worker k % workers and its result is stored at index k, so
    the output never depends on thread scheduling.
    """

    jobs: list[Callable[[], T]]
    workers: int
    threads: list[Thread]
    results: list[Optional[T]]
    errors: list[Optional[BaseException]]
    label: str

    def __init__(
        self,
        jobs: list[Callable[[], T]],
        workers: Optional[int] = None,
        label: str = "job",
    ) -> None:
        self.jobs = jobs
        self.workers = min(get_worker_count(workers), max(1, len(jobs)))
        self.threads = []
        self.results = [None] * len(jobs)
        self.errors = [None] * len(jobs)
        self.label = label

    def _work(self, worker: int) -> None:
        for k in range(worker, len(self.jobs), self.workers):
            try:
                self.results[k] = self.jobs[k]()
            except Exception as e:
                self.errors[k] = e
                logger.debug(f"{self.label} {k} failed: {e}")

    def main(self, raise_errors: bool = True) -> list[Optional[T]]:
        """Run every job; failed jobs leave None in their slot."""
        if self.workers == 1:
            self._work(0)
        else:
            for w in range(self.workers):
                self.threads.append(Thread(target=self._work, args=(w,), daemon=True))
            for t in self.threads:
                t.start()
            for t in self.threads:
                t.join()

        failed = [k for k, e in enumerate(self.errors) if e is not None]
        if failed:
            logger.warning(f"{len(failed)} of {len(self.jobs)} {self.label}s failed")
            if raise_errors:
                err = self.errors[failed[0]]
                assert err is not None
                raise err
        return self.results

    @property
    def failures(self) -> int:
        return sum(e is not None for e in self.errors)
