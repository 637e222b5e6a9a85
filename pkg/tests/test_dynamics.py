import itertools

import numpy as np
import pytest

from pomdp_ope.data import WindowConfig, generate_offline_dataset
from pomdp_ope.dynamics import (estimate_dynamics_moments, hmm_moments_empirical, hmm_moments_population,
                                hmm_spectral, minimax_dynamics, minimax_dynamics_enumerate,
                                population_dynamics_moments, spectral_conditional_distribution,
                                spectral_joint_probability)
from pomdp_ope.errors import ConfigurationError, InsufficientSupportError
from pomdp_ope.estimators import linear_function
from pomdp_ope.features import one_hot_history
from pomdp_ope.model import TabularPOMDP, observation_policy, random_memory_policy, random_tabular_pomdp, uniform_policy
from pomdp_ope.oracles import behavior_stationary_distribution, joint_sequence_probability, predictive_distribution

CFG = WindowConfig(0, 1, 2)


def _case(seed=4):
    model = random_tabular_pomdp(2, 3, 2, 0.9, seed)
    return model, uniform_policy(3, 2), random_memory_policy(3, 2, 0, seed + 1, min_prob=0.1)


def _pairs(n_obs=3, n_act=2):
    return list(itertools.product(range(n_obs), range(n_act)))


def test_empty_sequence_has_probability_one():
    model, pb, pe = _case()
    mom = population_dynamics_moments(model, pe, pb, CFG)
    assert abs(spectral_joint_probability(mom, []) - 1.0) < 1e-10


def test_population_matches_forward_algorithm_and_sums_to_one():
    model, pb, pe = _case()
    mom = population_dynamics_moments(model, pe, pb, CFG)
    total = 0.0
    for seq in itertools.product(_pairs(), repeat=2):
        p = spectral_joint_probability(mom, seq)
        assert abs(p - joint_sequence_probability(model, pe, seq)) < 1e-12
        total += p
    assert abs(total - 1.0) < 1e-10


def test_minimax_recursion_equals_closed_form():
    model, pb, pe = _case(6)
    mom = population_dynamics_moments(model, pe, pb, CFG)
    for seq in ([(0, 1)], [(2, 0), (1, 1), (0, 0)]):
        assert abs(minimax_dynamics(mom, seq) - spectral_joint_probability(mom, seq)) < 1e-12


def test_prefix_probabilities_are_monotone():
    model, pb, pe = _case(7)
    mom = population_dynamics_moments(model, pe, pb, CFG)
    seq = [(1, 0), (0, 1), (2, 1), (1, 1)]
    probs = [spectral_joint_probability(mom, seq[:t]) for t in range(len(seq) + 1)]
    assert all(a >= b - 1e-12 for a, b in zip(probs, probs[1:]))


def test_single_state_model_is_a_product():
    model = TabularPOMDP(np.ones((1, 2, 1)), [[0.2, 0.3, 0.5]], [[0.0, 1.0]], 0.9, [1.0])
    pb = uniform_policy(3, 2)
    pe = observation_policy([[0.7, 0.3], [0.4, 0.6], [0.1, 0.9]])
    mom = population_dynamics_moments(model, pe, pb, WindowConfig(0, 1, 1))
    seq = [(0, 0), (2, 1), (1, 1)]
    expected = (0.2 * 0.7) * (0.5 * 0.9) * (0.3 * 0.6)
    assert abs(spectral_joint_probability(mom, seq) - expected) < 1e-12


def test_conditional_distribution_matches_oracle():
    model, pb, pe = _case(8)
    mom = population_dynamics_moments(model, pe, pb, CFG)
    seq = [(0, 1), (2, 0)]
    probs = spectral_conditional_distribution(mom, seq)
    assert np.allclose(probs, predictive_distribution(model, pe, seq), atol=1e-12)


def test_conditional_moments_are_up_to_scale():
    model, pb, pe = _case(9)
    seq = [(1, 0), (0, 1)]
    full = population_dynamics_moments(model, pe, pb, CFG)
    scaled = population_dynamics_moments(model, pe, pb, CFG, conditional=True)
    factor = np.prod([scaled.pair_probs[p] for p in seq])
    assert np.isclose(spectral_joint_probability(scaled, seq) * factor, spectral_joint_probability(full, seq))
    assert np.allclose(spectral_conditional_distribution(scaled, seq), spectral_conditional_distribution(full, seq))


def test_empirical_conditional_is_a_distribution():
    model, pb, pe = _case(10)
    ds = generate_offline_dataset(model, pb, 300, 100, CFG, seed=1)
    mom = estimate_dynamics_moments(ds, pe, pb)
    res = spectral_conditional_distribution(mom, [(0, 0), (1, 1)], return_raw=True)
    assert np.all(res.probs >= 0) and abs(res.probs.sum() - 1.0) < 1e-12
    assert np.allclose(res.probs, np.clip(res.raw, 0, None) / np.clip(res.raw, 0, None).sum())


def test_empirical_converges_to_population():
    model, pb, pe = _case(11)
    seq = [(0, 1), (2, 0)]
    truth = joint_sequence_probability(model, pe, seq)
    ds = generate_offline_dataset(model, pb, 200_000, 50_000, CFG, seed=2, init_table=model.initial_state_dist[None])
    assert abs(spectral_joint_probability(estimate_dynamics_moments(ds, pe, pb), seq) - truth) < 0.02


def test_insufficient_support_and_config_errors():
    model, _, pe = _case()
    pb = observation_policy([[1.0, 0.0]] * 3)
    ds = generate_offline_dataset(model, pb, 50, 5, CFG, seed=0)
    with pytest.raises(InsufficientSupportError):
        estimate_dynamics_moments(ds, pb, pb, targets=[(0, 1)])
    with pytest.raises(ConfigurationError):
        population_dynamics_moments(model, pe, uniform_policy(3, 2), WindowConfig(1, 2, 1))
    with pytest.raises(ConfigurationError):
        estimate_dynamics_moments(ds, random_memory_policy(3, 2, 1, 0), pb)
    mom = estimate_dynamics_moments(ds, pb, pb, targets=[(0, 0)])
    with pytest.raises(ConfigurationError):
        spectral_joint_probability(mom, [(1, 1)])


def test_enumeration_recursion_with_singleton_classes():
    model, pb, pe = _case(12)
    ds = generate_offline_dataset(model, pb, 100, 20, CFG, seed=3)
    const = [lambda b: np.full(len(b), 0.5)]
    xi = [linear_function(np.zeros(6), one_hot_history(CFG, 3, 2))]
    assert np.isclose(minimax_dynamics_enumerate(ds, [const, const], xi, 1.0, [(0, 0)], pe, pb), 0.5)
    with pytest.raises(ConfigurationError):
        minimax_dynamics_enumerate(ds, [const], xi, 1.0, [(0, 0)], pe, pb)


# -- action-free case ----------------------------------------------------------------

def test_hmm_population_matches_forward_algorithm():
    model = random_tabular_pomdp(2, 3, 1, 0.9, 2)
    pol = uniform_policy(3, 1)
    pi = behavior_stationary_distribution(model, pol, 0)[0]
    mom = hmm_moments_population(model)
    assert mom.rank == 2
    for seq in ([0], [0, 2, 1], [1, 1, 1, 0]):
        expected = joint_sequence_probability(model, pol, [(o, 0) for o in seq], initial=pi)
        assert abs(hmm_spectral(mom, seq) - expected) < 1e-12


def test_hmm_agrees_with_single_action_dynamics():
    model = random_tabular_pomdp(2, 3, 1, 0.9, 3)
    pol = uniform_policy(3, 1)
    pi = behavior_stationary_distribution(model, pol, 0)[0]
    dyn = population_dynamics_moments(model, pol, pol, WindowConfig(0, 1, 1), init_table=pi[None, :])
    seq = [2, 0, 1]
    assert abs(hmm_spectral(hmm_moments_population(model), seq)
               - spectral_joint_probability(dyn, [(o, 0) for o in seq])) < 1e-12


def test_iid_hmm_is_product_of_marginals():
    emission = np.array([[0.2, 0.3, 0.5], [0.6, 0.1, 0.3]])
    model = TabularPOMDP(np.full((2, 1, 2), 0.5), emission, np.zeros((2, 1)), 0.9, [0.5, 0.5])
    marg = emission.mean(axis=0)
    mom = hmm_moments_population(model)
    assert abs(hmm_spectral(mom, [2, 0, 0]) - marg[2] * marg[0] ** 2) < 1e-12


def test_hmm_empirical_moments():
    rng = np.random.default_rng(0)
    seq = rng.integers(0, 2, size=(2000, 5))
    mom = hmm_moments_empirical(seq)
    assert abs(mom.p21.sum() - 1.0) < 1e-12 and abs(mom.p1.sum() - 1.0) < 1e-12
    assert abs(hmm_spectral(mom, [0, 1]) - 0.25) < 0.03
    with pytest.raises(ConfigurationError):
        hmm_moments_empirical(seq[:, :2])
    with pytest.raises(ConfigurationError):
        hmm_moments_population(random_tabular_pomdp(2, 3, 2, 0.9, 0))
