import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pomdp_ope.errors import ConfigurationError
from pomdp_ope.model import (LQGModel, MemoryPolicy, TabularPOMDP, decode_window, encode_window, load_model,
                             observation_policy, random_memory_policy, random_tabular_pomdp, save_model,
                             shift_code, uniform_policy)
from pomdp_ope.oracles import (behavior_stationary_distribution, burn_in_initial_distribution, discounted_occupancy,
                               exact_finite_horizon_value, exact_policy_value, joint_sequence_probability,
                               predictive_distribution, stationary_initial_distribution, value_function,
                               window_chain)
from pomdp_ope.simulate import monte_carlo_value, sample_trajectory, simulate_lqg, simulate_tabular


def _single_state(reward=1.0, gamma=0.5):
    return TabularPOMDP(np.ones((1, 1, 1)), np.ones((1, 1)), np.full((1, 1), reward), gamma, np.ones(1))


def _initial(model, policy):
    return burn_in_initial_distribution(model, policy)


# -- model validation ----------------------------------------------------------

def test_rejects_non_stochastic_rows():
    t = np.full((2, 1, 2), 0.5)
    t[0, 0] = [0.7, 0.4]
    with pytest.raises(ConfigurationError):
        TabularPOMDP(t, np.eye(2), np.zeros((2, 1)), 0.9, [0.5, 0.5])


def test_rejects_gamma_one():
    with pytest.raises(ConfigurationError):
        _single_state(gamma=1.0)


def test_policy_table_arity_checked():
    with pytest.raises(ConfigurationError):
        MemoryPolicy(1, table=np.full((1, 2, 2), 0.5))


def test_lqg_dimension_checks():
    with pytest.raises(ConfigurationError):
        LQGModel(np.eye(2), np.ones((3, 1)), np.eye(2), np.eye(2), np.eye(1), np.eye(2), np.eye(2))
    with pytest.raises(ConfigurationError):
        LQGModel(np.eye(2), np.ones((2, 1)), np.eye(2), -np.eye(2), np.eye(1), np.eye(2), np.eye(2))


def test_model_file_round_trip(tmp_path):
    model = random_tabular_pomdp(3, 2, 2, 0.8, 1)
    save_model(model, tmp_path / "m.json")
    again = load_model(tmp_path / "m.json")
    assert np.array_equal(again.transition, model.transition) and again.gamma == model.gamma
    lqg = LQGModel(np.eye(2) * 0.9, np.ones((2, 1)), np.eye(2), np.eye(2), np.eye(1), np.eye(2) * 0.1, np.eye(2))
    save_model(lqg, tmp_path / "l.json")
    assert np.array_equal(load_model(tmp_path / "l.json").A, lqg.A)


def test_model_file_key_mismatch(tmp_path):
    d = random_tabular_pomdp(2, 2, 2, 0.8, 1).to_dict()
    d["n_obs"] = 5
    (tmp_path / "m.json").write_text(json.dumps(d))
    with pytest.raises(ConfigurationError):
        load_model(tmp_path / "m.json")


@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 3), st.data())
def test_window_codes_round_trip(n_obs, n_actions, width, data):
    obs = data.draw(st.lists(st.integers(0, n_obs - 1), min_size=width, max_size=width))
    acts = data.draw(st.lists(st.integers(0, n_actions - 1), min_size=width, max_size=width))
    code = encode_window(np.array(obs), np.array(acts), n_obs, n_actions)
    o2, a2 = decode_window(code, width, n_obs, n_actions)
    assert o2.tolist() == obs and a2.tolist() == acts


def test_shift_code_drops_oldest_pair():
    code = encode_window(np.array([1, 0]), np.array([0, 1]), 2, 2)
    shifted = shift_code(code, 1 * 2 + 1, 2, 4)
    assert shifted == encode_window(np.array([0, 1]), np.array([1, 1]), 2, 2)


# -- sampling ------------------------------------------------------------------

def test_degenerate_chain_rewards():
    traj = sample_trajectory(_single_state(), uniform_policy(1, 1), 3, seed=0)
    assert traj.rewards.tolist() == [1.0, 1.0, 1.0]


def test_sampling_is_deterministic_per_seed():
    model = random_tabular_pomdp(3, 2, 2, 0.9, 0)
    pol = random_memory_policy(2, 2, 1, 1)
    a, b = sample_trajectory(model, pol, 50, seed=7), sample_trajectory(model, pol, 50, seed=7)
    for field in ("states", "obs", "acts", "rewards", "prefix_obs", "prefix_acts"):
        assert np.array_equal(getattr(a, field), getattr(b, field))


def test_symmetric_chain_frequencies_match_stationary_law():
    t = np.array([[[0.8, 0.2]], [[0.3, 0.7]]])
    model = TabularPOMDP(t, np.eye(2), np.zeros((2, 1)), 0.9, [1.0, 0.0])
    stationary = np.array([0.6, 0.4])
    batch = simulate_tabular(model, uniform_policy(2, 1), 20000, 50, np.random.default_rng(0), burn_in=30)
    freq = np.mean(batch.states[:, -1] == 0)  # one state per independent trajectory
    se = np.sqrt(stationary[0] * stationary[1] / 20000)
    assert abs(freq - stationary[0]) < 3 * se


def test_windows_shift_and_rewards_in_range():
    model = random_tabular_pomdp(3, 2, 2, 0.9, 3)
    pol = random_memory_policy(2, 2, 2, 4)
    traj = sample_trajectory(model, pol, 30, seed=1)
    obs = np.concatenate([traj.prefix_obs, traj.obs])
    acts = np.concatenate([traj.prefix_acts, traj.acts])
    assert len(obs) == 32 and traj.rewards.min() >= model.reward.min() and traj.rewards.max() <= model.reward.max()
    for t in range(30):
        assert np.isclose(traj.rewards[t], model.reward[traj.states[t], traj.acts[t]])
    assert np.array_equal(obs[2:], traj.obs) and np.array_equal(acts[2:], traj.acts)


def test_policy_model_mismatch_is_configuration_error():
    with pytest.raises(ConfigurationError):
        sample_trajectory(random_tabular_pomdp(2, 3, 2, 0.9, 0), uniform_policy(2, 2), 5, seed=0)


def test_lqg_simulation_shapes_and_determinism():
    lqg = LQGModel(np.eye(2) * 0.8, np.ones((2, 1)), np.eye(2), np.eye(2), np.eye(1), np.eye(2) * 0.1,
                   np.eye(2) * 0.1)
    pol = MemoryPolicy(1, gain=np.full((1, 5), -0.1), noise_std=0.3)
    a = simulate_lqg(lqg, pol, 4, 6, np.random.default_rng(3))
    b = simulate_lqg(lqg, pol, 4, 6, np.random.default_rng(3))
    assert a.obs.shape == (4, 6, 2) and a.acts.shape == (4, 6, 1) and np.array_equal(a.rewards, b.rewards)
    assert np.all(a.rewards <= 0)


# -- oracles -------------------------------------------------------------------

def test_zero_discount_value_is_expected_immediate_reward():
    model = random_tabular_pomdp(3, 4, 2, 0.0, 5)
    pe = random_memory_policy(4, 2, 0, 6)
    expected = sum(model.initial_state_dist[s] * model.emission[s, o] * pe.table[0, o, a] * model.reward[s, a]
                   for s in range(3) for o in range(4) for a in range(2))
    assert np.isclose(exact_policy_value(model, pe, model.initial_state_dist[None]), expected, atol=1e-12)


def test_constant_reward_value():
    model = random_tabular_pomdp(3, 2, 2, 0.9, 1).with_reward(np.full((3, 2), 2.0))
    pe = random_memory_policy(2, 2, 1, 2)
    assert np.isclose(exact_policy_value(model, pe, _initial(model, pe)), 20.0, atol=1e-10)


@pytest.mark.slow
def test_value_matches_monte_carlo():
    model = random_tabular_pomdp(3, 4, 2, 0.9, 8)
    pe = random_memory_policy(4, 2, 0, 9)
    init = model.initial_state_dist[None]
    mean, se = monte_carlo_value(model, pe, 1_000_000, 160, seed=1, init_table=init)
    assert abs(mean - exact_policy_value(model, pe, init)) < 3 * se + 0.9 ** 160 * 10


def test_value_matches_monte_carlo_memory_policy():
    model = random_tabular_pomdp(2, 2, 2, 0.8, 2)
    pe = random_memory_policy(2, 2, 1, 3)
    init = _initial(model, pe)
    mean, se = monte_carlo_value(model, pe, 100_000, 100, seed=4, init_table=init)
    assert abs(mean - exact_policy_value(model, pe, init)) < 3 * se


def test_value_invariant_to_observation_relabeling():
    model = random_tabular_pomdp(3, 4, 2, 0.9, 11)
    pe = random_memory_policy(4, 2, 0, 12)
    perm = [2, 0, 3, 1]
    init = model.initial_state_dist[None]
    v = exact_policy_value(model, pe, init)
    assert np.isclose(exact_policy_value(model.permute_observations(perm), pe.permute_observations(perm), init), v)


def test_finite_horizon_edge_cases():
    model = random_tabular_pomdp(3, 2, 2, 0.9, 4)
    pe = random_memory_policy(2, 2, 0, 5)
    init = model.initial_state_dist[None]
    assert np.isclose(exact_finite_horizon_value(model, pe, init, 1),
                      exact_policy_value(model.with_gamma(0.0), pe, init))
    tail = 0.9 ** 60 / 0.1 * np.abs(model.reward).max()
    assert abs(exact_finite_horizon_value(model, pe, init, 60) - exact_policy_value(model, pe, init)) <= tail
    with pytest.raises(ConfigurationError):
        exact_finite_horizon_value(model, pe, init, 0)


def test_finite_horizon_matches_path_enumeration():
    model = random_tabular_pomdp(2, 2, 2, 0.9, 6)
    pe = random_memory_policy(2, 2, 0, 7)
    horizon = 5
    total = 0.0
    for states in itertools.product(range(2), repeat=horizon):
        for obs in itertools.product(range(2), repeat=horizon):
            for acts in itertools.product(range(2), repeat=horizon):
                prob, ret = model.initial_state_dist[states[0]], 0.0
                for t in range(horizon):
                    s, o, a = states[t], obs[t], acts[t]
                    prob *= model.emission[s, o] * pe.table[0, o, a]
                    if t + 1 < horizon:
                        prob *= model.transition[s, a, states[t + 1]]
                    ret += 0.9 ** t * model.reward[s, a]
                total += prob * ret
    exact = exact_finite_horizon_value(model, pe, model.initial_state_dist[None], horizon)
    assert np.isclose(total, exact, atol=1e-12)


def test_deterministic_cycle_stationary_law():
    t = np.zeros((3, 1, 3))
    for s in range(3):
        t[s, 0, (s + 1) % 3] = 1.0
    model = TabularPOMDP(t, np.eye(3), np.zeros((3, 1)), 0.5, [1.0, 0.0, 0.0])
    dist = behavior_stationary_distribution(model, uniform_policy(3, 1), 0)
    assert np.allclose(dist.ravel(), 1 / 3, atol=1e-10)


def test_stationary_law_normalized_and_matches_simulation():
    model = random_tabular_pomdp(2, 2, 2, 0.9, 13)
    pb = uniform_policy(2, 2)
    dist = behavior_stationary_distribution(model, pb, 1)
    assert abs(dist.sum() - 1.0) < 1e-10
    batch = simulate_tabular(model, pb, 20000, 1, np.random.default_rng(0), burn_in=60)
    freq = np.mean(batch.states[:, 0] == 0)
    p = dist[:, 0].sum()
    assert abs(freq - p) < 3 * np.sqrt(p * (1 - p) / 20000)


def test_discounted_occupancy_properties():
    model = random_tabular_pomdp(3, 2, 2, 0.9, 14)
    pe = random_memory_policy(2, 2, 1, 15)
    init = _initial(model, pe)
    d = discounted_occupancy(model, pe, init)
    assert abs(d.sum() - 1.0) < 1e-10 and np.all(d >= -1e-15)
    assert np.allclose(discounted_occupancy(model.with_gamma(0.0), pe, init), init)
    # E_d[E[R | z, s]] / (1 - gamma) equals the policy value
    chain = window_chain(model, pe, 1)
    assert np.isclose(d.ravel() @ chain.reward / 0.1, exact_policy_value(model, pe, init))


def test_stationary_initial_distribution_is_invariant():
    model = random_tabular_pomdp(2, 2, 2, 0.9, 16)
    pb = random_memory_policy(2, 2, 1, 17)
    nu = stationary_initial_distribution(model, pb)
    chain = window_chain(model, pb, 1)
    assert np.allclose(chain.matrix.T @ nu.ravel(), nu.ravel(), atol=1e-9)


def test_value_function_shape():
    model = random_tabular_pomdp(3, 2, 2, 0.9, 1)
    assert value_function(model, random_memory_policy(2, 2, 1, 2)).shape == (4, 3)


def test_joint_probability_single_state():
    model = TabularPOMDP(np.ones((1, 2, 1)), [[0.3, 0.7]], np.zeros((1, 2)), 0.9, [1.0])
    pe = observation_policy([[0.4, 0.6], [0.9, 0.1]])
    seq = [(1, 0), (0, 1), (1, 1)]
    expected = np.prod([model.emission[0, o] * pe.table[0, o, a] for o, a in seq])
    assert np.isclose(joint_sequence_probability(model, pe, seq), expected)


def test_joint_probabilities_normalize_and_match_path_sum():
    model = random_tabular_pomdp(2, 2, 2, 0.9, 18)
    pe = random_memory_policy(2, 2, 0, 19)
    pairs = [(o, a) for o in range(2) for a in range(2)]
    seqs = list(itertools.product(pairs, repeat=3))
    assert np.isclose(sum(joint_sequence_probability(model, pe, s) for s in seqs), 1.0, atol=1e-12)
    for seq in seqs[:10]:
        brute = 0.0
        for states in itertools.product(range(2), repeat=3):
            p = model.initial_state_dist[states[0]]
            for t, (o, a) in enumerate(seq):
                p *= model.emission[states[t], o] * pe.table[0, o, a]
                if t < 2:
                    p *= model.transition[states[t], a, states[t + 1]]
            brute += p
        assert abs(brute - joint_sequence_probability(model, pe, seq)) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=4))
def test_joint_probability_prefix_monotone(seed, seq):
    model = random_tabular_pomdp(2, 2, 2, 0.9, seed)
    pe = random_memory_policy(2, 2, 0, seed + 1)
    assert joint_sequence_probability(model, pe, seq) <= joint_sequence_probability(model, pe, seq[:-1]) + 1e-15


def test_joint_probability_errors():
    model = random_tabular_pomdp(2, 2, 2, 0.9, 0)
    with pytest.raises(ConfigurationError):
        joint_sequence_probability(model, uniform_policy(2, 2), [(5, 0)])
    with pytest.raises(ConfigurationError):
        joint_sequence_probability(model, uniform_policy(2, 2, 1), [(0, 0)])


def test_predictive_distribution_sums_to_one():
    model = random_tabular_pomdp(3, 3, 2, 0.9, 20)
    pe = random_memory_policy(3, 2, 0, 21)
    pred = predictive_distribution(model, pe, [(0, 1), (2, 0)])
    assert np.isclose(pred.sum(), 1.0) and np.all(pred >= 0)
