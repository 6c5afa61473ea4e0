import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import enumerate_q1, loop_ratios, random_mdp, random_policy
from rltmle.environments import make_modelfail, make_modelwin
from rltmle.exceptions import AbsoluteContinuityError, ConfigurationError, InvariantViolation
from rltmle.mdp import (
    Dataset,
    DiscountSpec,
    StochasticPolicy,
    TabularMDP,
    Trajectory,
    discounted_returns,
    exact_policy_value,
    exact_q_functions,
    importance_ratios,
    range_bounds,
    ratio_matrix,
    return_to_go,
    simulate,
)


def chain_mdp(reward=1.0):
    return TabularMDP.from_transitions(1, 1, {(0, 0): [(0, reward, 1.0)]}, reward_bounds=(-1.0, 1.0))


def test_simulate_deterministic_chain():
    data = simulate(chain_mdp(), StochasticPolicy([[1.0]]), 3, 5, seed=0)
    assert np.array_equal(data.rewards, np.ones((5, 3)))


def test_simulate_same_seed_identical():
    env = make_modelwin()
    a = simulate(env.mdp, env.behavior, 20, 50, seed=7)
    b = simulate(env.mdp, env.behavior, 20, 50, seed=7)
    for name in ("states", "observations", "actions", "rewards"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_simulate_modelwin_behavior_frequency():
    env = make_modelwin()
    data = simulate(env.mdp, env.behavior, 20, 10_000, seed=1)
    at_s1 = data.states[:, 0] == 0
    freq = np.mean(data.actions[at_s1, 0] == 0)
    assert abs(freq - 0.73) < 0.02


def test_simulate_starts_in_initial_state_and_checks_shapes():
    env = make_modelwin()
    data = simulate(env.mdp, env.behavior, 4, 10, seed=3)
    assert np.all(data.states[:, 0] == env.mdp.initial_state)
    with pytest.raises(ConfigurationError):
        simulate(env.mdp, StochasticPolicy([[0.5, 0.5]]), 4, 10, seed=3)
    with pytest.raises(ConfigurationError):
        simulate(env.mdp, env.behavior, 0, 10, seed=3)


def test_ratios_identical_policies(rng):
    mdp = random_mdp(rng, 3, 2)
    pi = random_policy(rng, 3, 2)
    data = simulate(mdp, pi, 5, 20, seed=2)
    assert np.all(ratio_matrix(data, pi, pi) == 1.0)


def test_ratios_two_step_product():
    mdp = TabularMDP.from_transitions(1, 2, {(0, 0): [(0, 0.0, 1.0)], (0, 1): [(0, 0.0, 1.0)]})
    pi_e = StochasticPolicy([[[0.5, 0.5]], [[0.25, 0.75]]])
    pi_b = StochasticPolicy([[[0.25, 0.75]], [[0.5, 0.5]]])
    traj = Trajectory(np.zeros(2, int), np.zeros(2, int), np.zeros(2, int), np.zeros(2))
    assert np.allclose(importance_ratios(traj, pi_e, pi_b), [2.0, 1.0], atol=0, rtol=1e-15)


def test_ratios_match_loop_product(rng):
    mdp = random_mdp(rng, 3, 2)
    pi_e, pi_b = random_policy(rng, 3, 2), random_policy(rng, 3, 2)
    data = simulate(mdp, pi_b, 6, 40, seed=5)
    expected = loop_ratios(data, pi_e, pi_b)
    assert np.max(np.abs(ratio_matrix(data, pi_e, pi_b) - expected)) < 1e-14
    for i in range(5):
        assert np.max(np.abs(importance_ratios(data[i], pi_e, pi_b) - expected[i])) < 1e-14


def test_ratios_absolute_continuity_violation():
    mdp = TabularMDP.from_transitions(1, 2, {(0, 0): [(0, 0.0, 1.0)], (0, 1): [(0, 0.0, 1.0)]})
    pi_b = StochasticPolicy([[1.0, 0.0]])
    pi_e = StochasticPolicy([[0.5, 0.5]])
    data = Dataset(np.zeros((1, 2), int), np.zeros((1, 2), int), np.array([[0, 1]]), np.zeros((1, 2)))
    with pytest.raises(AbsoluteContinuityError):
        ratio_matrix(data, pi_e, pi_b)
    with pytest.raises(AbsoluteContinuityError):
        importance_ratios(data[0], pi_e, pi_b)


def _traj(rewards):
    T = len(rewards)
    return Trajectory(np.zeros(T, int), np.zeros(T, int), np.zeros(T, int), np.asarray(rewards, float))


def test_return_to_go_examples():
    assert return_to_go(_traj([1] * 5), 1, DiscountSpec(1.0)) == 5
    assert return_to_go(_traj([1, 2, 4]), 1, DiscountSpec(0.5)) == 3
    with pytest.raises(ConfigurationError):
        return_to_go(_traj([1, 2]), 3, DiscountSpec(1.0))


def test_return_to_go_matches_loop(rng):
    r = rng.uniform(-1, 1, size=9)
    gamma = 0.9
    for t in range(1, 10):
        expected = sum(gamma ** (tau - t) * r[tau - 1] for tau in range(t, 10))
        assert abs(return_to_go(_traj(r), t, DiscountSpec(gamma)) - expected) < 1e-14


@given(
    rewards=st.lists(st.floats(-2, 3), min_size=1, max_size=12),
    gamma=st.floats(0.05, 1.0),
    data=st.data(),
)
def test_return_to_go_within_range_bound(rewards, gamma, data):
    t = data.draw(st.integers(1, len(rewards)))
    delta = range_bounds((-2.0, 3.0), len(rewards), DiscountSpec(gamma))
    value = return_to_go(_traj(rewards), t, DiscountSpec(gamma))
    assert abs(value) <= delta[t - 1] * (1 + 1e-12)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=15))
def test_return_to_go_undiscounted_is_sum(rewards):
    assert abs(return_to_go(_traj(rewards), 1, DiscountSpec(1.0)) - sum(rewards)) < 1e-12


@given(st.integers(0, 10_000))
def test_identical_policy_ratios_are_exactly_one(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 3, 3)
    pi = random_policy(rng, 3, 3)
    data = simulate(mdp, pi, 4, 8, seed=seed)
    assert np.all(ratio_matrix(data, pi, pi) == 1.0)


def test_exact_value_chain():
    assert exact_policy_value(chain_mdp(), StochasticPolicy([[1.0]]), 3, DiscountSpec(1.0)) == 3
    q = exact_q_functions(chain_mdp(), StochasticPolicy([[1.0]]), 4, DiscountSpec(0.5))
    assert np.allclose(q.q[:, 0, 0], [1.875, 1.75, 1.5, 1.0], atol=1e-15)


def test_exact_value_modelwin_monte_carlo():
    env = make_modelwin()
    truth = exact_policy_value(env.mdp, env.evaluation, 20, DiscountSpec(1.0))
    total = total_sq = 0.0
    episodes = 0
    for chunk in range(10):
        data = simulate(env.mdp, env.evaluation, 20, 100_000, seed=100 + chunk)
        g = discounted_returns(data, DiscountSpec(1.0))
        total += g.sum()
        total_sq += (g**2).sum()
        episodes += len(g)
    mean = total / episodes
    se = np.sqrt((total_sq / episodes - mean**2) / episodes)
    assert abs(mean - truth) < 3 * se


def test_exact_value_modelfail_behavior():
    env = make_modelfail()
    value = exact_policy_value(env.mdp, env.behavior, 2, DiscountSpec(1.0))
    assert abs(value - (0.88 * 1 + 0.12 * -1)) < 1e-12


def test_q_functions_consistency_and_enumeration(rng):
    mdp = random_mdp(rng, 4, 2, max_outcomes=3)
    pi = random_policy(rng, 4, 2)
    d = DiscountSpec(0.8)
    q = exact_q_functions(mdp, pi, 3, d)
    assert abs((pi.probs[0] @ q.q[0, 0]) - exact_policy_value(mdp, pi, 3, d)) < 1e-12
    assert np.max(np.abs(q.q[0] - enumerate_q1(mdp, pi, 3, d))) < 1e-12


def test_q_functions_bellman_consistency(rng):
    mdp = random_mdp(rng, 4, 3, max_outcomes=3)
    pi = random_policy(rng, 4, 3)
    d = DiscountSpec(0.9)
    T = 5
    q = exact_q_functions(mdp, pi, T, d)
    v = np.vstack([(pi.probs * q.q[t]).sum(axis=1) for t in range(T)] + [np.zeros(4)])
    trans = mdp.transitions()
    for t in range(T):
        for s in range(4):
            for a in range(3):
                rhs = sum(p * (r + d.gamma * v[t + 1, sp]) for sp, r, p in trans[s, a])
                assert abs(q.q[t, s, a] - rhs) < 1e-12


def test_mdp_invariants_rejected():
    with pytest.raises(InvariantViolation):
        TabularMDP.from_transitions(1, 1, {(0, 0): [(0, 0.0, 0.9)]})
    with pytest.raises(InvariantViolation):
        TabularMDP.from_transitions(1, 1, {(0, 0): [(0, 2.0, 1.0)]}, reward_bounds=(-1, 1))
    with pytest.raises(ConfigurationError):
        TabularMDP.from_transitions(1, 2, {(0, 0): [(0, 0.0, 1.0)]})
    with pytest.raises(InvariantViolation):
        StochasticPolicy([[0.5, 0.6]])


def test_mdp_and_policy_json_roundtrip(rng):
    mdp = random_mdp(rng, 4, 2, aliased=True)
    back = TabularMDP.from_dict(json.loads(json.dumps(mdp.to_dict())))
    assert np.allclose(back.transition_matrix, mdp.transition_matrix)
    assert np.array_equal(back.observation_map, mdp.observation_map)
    assert back.reward_bounds == mdp.reward_bounds
    pi = random_policy(rng, 2, 2)
    assert np.array_equal(StochasticPolicy.from_dict(json.loads(json.dumps(pi.to_dict()))).probs, pi.probs)


def test_dataset_jsonl_roundtrip_and_split(tmp_path):
    env = make_modelfail()
    data = simulate(env.mdp, env.behavior, 2, 10, seed=4)
    path = tmp_path / "d.jsonl"
    data.to_jsonl(path)
    back = Dataset.from_jsonl(path)
    assert np.array_equal(back.actions, data.actions) and np.array_equal(back.observations, data.observations)
    first, second = data.split(0.3)
    assert first.n == 3 and second.n == 7
    assert np.array_equal(Dataset.concatenate([first, second]).states, data.states)
    with pytest.raises(ConfigurationError):
        data.split(1.0)


def test_dataset_rejects_mixed_initial_states():
    with pytest.raises(ConfigurationError):
        Dataset(np.array([[0], [1]]), np.array([[0], [1]]), np.zeros((2, 1), int), np.zeros((2, 1)))
