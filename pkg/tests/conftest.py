import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gridqa.dataset_gen import DatasetConfig, EnvConfig, build_dataset, generate_environment

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow], max_examples=40)
settings.load_profile("default")

SMALL = EnvConfig(width=11, height=11, n_rooms=2, n_objects=4)
TINY_DATA = DatasetConfig(n_train_envs=3, n_val_envs=1, n_test_envs=2, master_seed=5,
                          env=EnvConfig(width=15, height=15, n_rooms=2, n_objects=6))


def small_env(seed, cfg=SMALL):
    return generate_environment(seed, cfg, f"small-{seed}")


@pytest.fixture(scope="session")
def tiny_dataset():
    return build_dataset(TINY_DATA)


@pytest.fixture(scope="session")
def default_dataset():
    return build_dataset(DatasetConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    CRITERIA[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
