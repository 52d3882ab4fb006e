import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from memtl.dataset import generate_dataset, shift_split
from memtl.features import SamplingRanges
from memtl.mec import Environment, MtParams
from memtl.model import TrainConfig, train_memtl, train_mtfnn

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FAST = TrainConfig(epochs=4)


def mt(**kw) -> MtParams:
    base = dict(c=1.0, r_local=1.0, p=0.0, q=0.0, u=1.0, d=1.0, P_u=0.0, P_e=0.0, P_d=0.0, theta=math.inf)
    base.update(kw)
    return MtParams(**base)


def env_of(*mts, alpha=0.5, kappa=0.05, f_mes=12.0) -> Environment:
    return Environment(tuple(mts), alpha, kappa, f_mes)


def random_env(rng: np.random.Generator, n: int, theta=(2.0, 20.0), alpha=None) -> Environment:
    mts = [
        MtParams(
            c=rng.uniform(1, 10), r_local=rng.uniform(1, 4), p=rng.uniform(0, 8), q=rng.uniform(0, 2),
            u=rng.uniform(1, 8), d=rng.uniform(2, 10), P_u=rng.uniform(0, 2), P_e=rng.uniform(0, 1),
            P_d=rng.uniform(0, 1), theta=theta[0] if theta[0] == theta[1] else rng.uniform(*theta),
        )
        for _ in range(n)
    ]
    a = rng.uniform() if alpha is None else alpha
    return Environment(tuple(mts), a, rng.uniform(0.01, 0.1), rng.uniform(4, 20))


@pytest.fixture(scope="session")
def small_ds():
    return generate_dataset(SamplingRanges(n=2), 300, seed=7)


@pytest.fixture(scope="session")
def small_split(small_ds):
    return shift_split(small_ds, 0.25)


@pytest.fixture(scope="session")
def small_memtl(small_split):
    model, logs = train_memtl(small_split[0], 3, cfg=FAST, seed=3)
    return model, logs


@pytest.fixture(scope="session")
def small_mtfnn(small_split):
    return train_mtfnn(small_split[0], cfg=FAST, seed=3)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
