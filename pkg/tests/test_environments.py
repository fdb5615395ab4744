import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ftrl_mdp.environments import (
    AdversarialEnv,
    CorruptedEnv,
    MdpGenerator,
    StochasticEnv,
    corruption_amount,
    diamond_means,
    gap_function,
    random_means,
    switching_tables,
)
from ftrl_mdp.mdp import (
    DomainError,
    bandit_mdp,
    best_fixed_policy,
    deterministic_policy,
    expected_loss,
    iter_deterministic_policies,
    occupancy_from_policy,
)

from conftest import small_instances


def test_zero_width_noise_gives_means():
    m = np.array([0.2, 0.7, 0.0, 1.0])
    for env in (StochasticEnv(m, noise="uniform", width=0.0), StochasticEnv(m, noise="none")):
        for t in (1, 2, 500):
            np.testing.assert_array_equal(env.losses(t), m)


def test_losses_in_unit_interval_and_reproducible():
    m = np.linspace(0, 1, 7)
    for noise, width in (("bernoulli", 0), ("uniform", 0.3)):
        env = StochasticEnv(m, noise, width, seed=4)
        again = StochasticEnv(m, noise, width, seed=4)
        for t in range(1, 50):
            x = env.losses(t)
            assert x.min() >= 0 and x.max() <= 1
            np.testing.assert_array_equal(x, again.losses(t))
        # random access in t
        np.testing.assert_array_equal(env.losses(17), again.losses(17))


def test_uniform_clipped_mean_monte_carlo():
    m = np.array([0.05, 0.5, 0.97])
    env = StochasticEnv(m, "uniform", 0.2, seed=1)
    draws = np.array([env.losses(t) for t in range(1, 40001)])
    assert np.abs(draws.mean(axis=0) - env.expected_loss()).max() < 4 * 0.2 / np.sqrt(40000) * 2


def test_invalid_stochastic():
    with pytest.raises(DomainError):
        StochasticEnv(np.array([1.2]))
    with pytest.raises(DomainError):
        StochasticEnv(np.array([0.2]), noise="gauss")
    with pytest.raises(DomainError):
        StochasticEnv(np.array([0.2])).losses(0)


def test_zero_budget_equals_base(diamond):
    base = StochasticEnv(diamond_means(), seed=7)
    env = CorruptedEnv(StochasticEnv(diamond_means(), seed=7), diamond, 0.0)
    for t in range(1, 200):
        np.testing.assert_array_equal(env.losses(t), base.losses(t))
    assert env.consumed_corruption == 0.0


@pytest.mark.parametrize("placement", ["front", "random"])
@pytest.mark.parametrize("budget", [0.5, 7.3, 40.0])
def test_corruption_accounting(diamond, placement, budget):
    base = StochasticEnv(diamond_means(), seed=2)
    env = CorruptedEnv(base, diamond, budget, placement=placement, rate=0.2)
    T = 400
    realized = np.array([env.losses(t) for t in range(1, T + 1)])
    clean = np.array([base.losses(t) for t in range(1, T + 1)])
    assert realized.min() >= 0 and realized.max() <= 1
    spent = corruption_amount(diamond, realized, clean)
    assert env.consumed_after(T) == pytest.approx(spent, abs=1e-12)
    assert spent <= budget + 1e-12
    assert spent == pytest.approx(budget, abs=1e-12)


def test_front_corruption_targets_optimal_actions(diamond):
    env = CorruptedEnv(StochasticEnv(diamond_means(), seed=0), diamond, 100.0)
    np.testing.assert_array_equal(env.losses(1), np.tile([1.0, 0.0], 3))


def test_switching_changes_exactly_at_phase_boundary():
    tables = np.array([[0.1, 0.9], [0.9, 0.1]])
    env = AdversarialEnv("switching", 2, 2, phase=100, tables=tables)
    for t in range(1, 101):
        np.testing.assert_array_equal(env.losses(t), tables[0])
    np.testing.assert_array_equal(env.losses(101), tables[1])
    np.testing.assert_array_equal(env.losses(201), tables[0])


def test_switching_tables_structure(diamond):
    tables = switching_tables(diamond, 0.05, seed=3)
    assert tables.shape == (2, 6)
    np.testing.assert_allclose(tables.sum(axis=0), 1.0)
    # one favoured action per state in the first table
    assert ((tables[0].reshape(3, 2) < 0.5).sum(axis=1) == 1).all()


def test_adaptive_adversary_hits_modal_action():
    env = AdversarialEnv("adaptive", 6, 2)
    q = np.array([0.3, 0.7, 0.2, 0.1, 0.1, 0.6])
    np.testing.assert_array_equal(env.losses(5, [q]), [0, 1, 1, 0, 0, 1])
    np.testing.assert_array_equal(env.losses(1, []), [1, 0, 1, 0, 1, 0])


def test_gap_bandit():
    g = gap_function(StochasticEnv(np.array([0.1, 0.9])), bandit_mdp(2))
    assert g.policy[0] == 0
    assert g.delta[0, 1] == pytest.approx(0.8)
    assert g.min_gap == pytest.approx(0.8)


def test_gap_diamond_against_enumeration(diamond):
    # path through u (s0 -> a0) is optimal
    means = np.array([0.1, 0.3, 0.2, 0.6, 0.5, 0.4])
    g = gap_function(StochasticEnv(means), diamond)
    assert g.policy[0] == 0
    best_by_first = {}
    for choice in iter_deterministic_policies(diamond):
        v = expected_loss(occupancy_from_policy(diamond, deterministic_policy(diamond, choice)), means)
        a0 = int(choice[0])
        best_by_first[a0] = min(best_by_first.get(a0, np.inf), v)
    assert g.delta[0, 1] == pytest.approx(best_by_first[1] - best_by_first[0], abs=1e-12)


def test_gap_requires_unique_optimum(diamond):
    with pytest.raises(DomainError, match="gap condition violated"):
        gap_function(StochasticEnv(np.full(6, 0.5)), diamond)


@settings(max_examples=40)
@given(st.integers(0, 10**6))
def test_performance_difference_identity(seed):
    rng = np.random.default_rng(seed)
    m = small_instances(seed % 31, 3)[seed % 3]
    means = random_means(m, rng)
    g = gap_function(StochasticEnv(means), m)
    qstar = occupancy_from_policy(m, deterministic_policy(m, g.policy))
    q = occupancy_from_policy(m, rng.dirichlet(np.ones(m.num_actions), size=m.num_states))
    lhs = expected_loss(q - qstar, means)
    rhs = float(np.sum(q.reshape(m.num_states, -1) * g.delta))
    assert lhs == pytest.approx(rhs, abs=1e-9)
    assert expected_loss(qstar, means) == pytest.approx(best_fixed_policy(m, means)[1], abs=1e-12)


def test_generator_invariants():
    for seed in range(20):
        gen = MdpGenerator((3, 2, 4), 3, sparsity=0.4, seed=seed)
        m = gen.generate()
        assert m.num_layers == 4 and m.num_actions == 3
        assert m.layer_sizes == (1, 3, 2, 4, 1)
        np.testing.assert_allclose(m.P.sum(axis=2), 1.0, atol=1e-12)
        # generation is seeded
        np.testing.assert_array_equal(m.P, gen.generate().P)


def test_diamond_means_gap(diamond):
    g = gap_function(StochasticEnv(diamond_means(0.3)), diamond)
    assert (g.policy == 0).all()
    assert g.delta[1:, 1] == pytest.approx([0.3, 0.3])
