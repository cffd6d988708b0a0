import numpy as np
import pytest

from rbayes.protocols import RB
from rbayes.qsim import NoiseModel, depolarizing, simulate_dataset
from rbayes.structs import DatasetRecord, SamplerConfig

SMALL_LENGTHS = [1, 5, 20, 60]


@pytest.fixture(autouse=True)
def single_worker(monkeypatch):
    # keeps thread scheduling out of every test by default
    monkeypatch.setenv("RBAYES_THREADS", "1")


@pytest.fixture
def rb():
    return RB()


@pytest.fixture
def rb_records(rb):
    noise = NoiseModel.gate_independent(depolarizing(0.02))
    return simulate_dataset(rb, noise, rb.default_spam(0.98), SMALL_LENGTHS, I=8, N=40, seed=3)


@pytest.fixture
def handmade_records():
    rows = [
        (1, 0, 19), (1, 1, 20), (1, 2, 18),
        (10, 0, 15), (10, 1, 17), (10, 2, 13),
        (40, 0, 9), (40, 1, 12), (40, 2, 10),
    ]
    return [DatasetRecord(M=M, e="0", i=i, N=20, Q=Q) for M, i, Q in rows]


@pytest.fixture
def quick_sampler():
    return SamplerConfig(chains=2, warmup=200, keep=200, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
