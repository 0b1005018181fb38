from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from src.core import SoftmaxPolicy  # noqa: E402
from src.synth_env import (  # noqa: E402
    Dataset,
    EnvSpec,
    Environment,
    RatingModel,
    make_environment,
    sample_dataset,
)


def pytest_configure(config: pytest.Config) -> None:
    config.addinivalue_line("markers", "slow: long statistical runs")


@pytest.fixture
def small_env() -> Environment:
    """3 prompts x 4 responses with a non-uniform data policy (π_ref = π_data)."""

    return make_environment(
        EnvSpec(num_prompts=3, num_responses=4, r_max=2.0, reward_seed=7, data_logit_scale=0.5)
    )


@pytest.fixture
def uniform_env() -> Environment:
    return make_environment(EnvSpec(num_prompts=3, num_responses=4, r_max=2.0, reward_seed=3))


@pytest.fixture
def noisy_dataset(small_env: Environment) -> Dataset:
    return sample_dataset(small_env, 200, RatingModel.gaussian(0.25), 11)


@pytest.fixture
def exact_dataset(small_env: Environment) -> Dataset:
    return sample_dataset(small_env, 300, RatingModel.exact(), 5)


@pytest.fixture
def random_policy(small_env: Environment) -> SoftmaxPolicy:
    return SoftmaxPolicy(0.7 * np.random.default_rng(3).standard_normal(small_env.shape))
