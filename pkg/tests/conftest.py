import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ftrl_mdp.environments import MdpGenerator
from ftrl_mdp.mdp import bandit_mdp, diamond_mdp

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def diamond():
    return diamond_mdp()


@pytest.fixture
def bandit2():
    return bandit_mdp(2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def small_instances(seed=0, count=12):
    """Random layered MDPs with L in {1, 2, 3}."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        L = 1 + i % 3
        widths = tuple(int(w) for w in rng.integers(1, 4, size=L - 1))
        A = int(rng.integers(2, 4))
        out.append(MdpGenerator(widths, A, float(rng.uniform(0.3, 1.0))).generate(rng))
    return out
