import numpy as np
import pytest

from daqn.cohort import default_env_spec, generate_synthetic_cohort
from daqn.cohort.episode import Normalizer
from daqn.cohort.windows import TransitionSet
from daqn.net import DaqnConfig, HistoryBatch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def env_spec():
    return default_env_spec()


@pytest.fixture(scope="session")
def small_cohort(env_spec):
    return generate_synthetic_cohort(env_spec, 120, seed=7)


@pytest.fixture(scope="session")
def small_transitions(small_cohort):
    eps = small_cohort.episodes
    return TransitionSet(eps, 4, 25, Normalizer.fit(eps))


@pytest.fixture
def tiny_config():
    return DaqnConfig(obs_dim=5, static_dim=2, num_actions=4, lookback=3, num_blocks=2, num_heads=2,
                      embed_dim=8, ff_dim=12, hidden_dim=6)


def make_batch(rng, cfg, n=6, valid_len=None):
    L = cfg.window
    vl = rng.integers(1, L + 1, size=n) if valid_len is None else np.full(n, valid_len)
    obs = rng.standard_normal((n, L, cfg.obs_dim))
    for i, v in enumerate(vl):
        obs[i, :L - v] = 0.0
    return HistoryBatch(obs, vl, rng.standard_normal((n, cfg.static_dim)))


@pytest.fixture
def batch_factory():
    return make_batch
