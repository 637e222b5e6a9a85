import numpy as np
import pytest

from pomdp_ope.data import WindowConfig, generate_offline_dataset
from pomdp_ope.errors import ConfigurationError
from pomdp_ope.estimators import (EstimatorConfig, MomentSet, compute_moments_empirical, compute_moments_population,
                                  exact_nu_mean, finite_horizon_linear, grid_linear_class, linear_function,
                                  linear_inner_max, minimax_enumerate, minimax_linear, minimax_rkhs, projected_residual,
                                  sis_estimate)
from pomdp_ope.features import gaussian_kernel, linear_kernel, one_hot_fbar, one_hot_history
from pomdp_ope.model import random_memory_policy, random_tabular_pomdp, uniform_policy
from pomdp_ope.oracles import burn_in_initial_distribution, exact_finite_horizon_value, exact_policy_value
from pomdp_ope.population import population_dataset
from pomdp_ope.simulate import simulate_tabular

CFG = WindowConfig(0, 1, 1)


def _case(seed=0, gamma=0.8):
    model = random_tabular_pomdp(2, 3, 2, gamma, seed)
    pb = uniform_policy(3, 2)
    pe = random_memory_policy(3, 2, 0, seed + 50, min_prob=0.1)
    return model, pb, pe, burn_in_initial_distribution(model, pb)


def _maps(cfg=CFG, n_obs=3, n_act=2):
    return one_hot_fbar(cfg, n_obs, n_act), one_hot_history(cfg, n_obs, n_act)


def _population(seed=0, gamma=0.8):
    model, pb, pe, init = _case(seed, gamma)
    pf, ph = _maps()
    return model, pb, pe, init, compute_moments_population(model, pb, pe, pf, ph, CFG, init)


# -- moments ------------------------------------------------------------------------

def test_single_tuple_moments():
    model, pb, _, _ = _case()
    ds = generate_offline_dataset(model, pb, 1, 1, CFG, seed=3)
    pf, ph = _maps()
    mom = compute_moments_empirical(ds, pf, ph, pb, pb, 0.0)
    f, h = pf.dense(ds.fbar())[0], ph.dense(ds.history())[0]
    assert np.allclose(mom.m2, np.outer(h, f))
    assert np.allclose(mom.m1, h * ds.rewards[0])
    assert np.allclose(mom.m3, np.outer(h, h))


def test_m3_is_psd():
    *_, mom = _population(1)
    assert np.linalg.eigvalsh(mom.m3).min() > -1e-14


def test_empirical_moments_converge_to_population():
    model, pb, pe, init, pop = _population(2)
    pf, ph = _maps()
    errs = []
    for n in (1_000, 100_000):
        ds = generate_offline_dataset(model, pb, n, 0, CFG, seed=4)
        emp = compute_moments_empirical(ds, pf, ph, pe, pb, model.gamma, nu_mean=pop.nu_mean)
        errs.append(max(np.abs(emp.m1 - pop.m1).max(), np.abs(emp.m2 - pop.m2).max(), np.abs(emp.m3 - pop.m3).max()))
    assert errs[1] < errs[0] / 3 and errs[1] < 0.01


def test_exact_nu_mean_matches_population_initial_samples():
    model, pb, _, init, pop = _population(3)
    pf, _ = _maps()
    assert np.allclose(exact_nu_mean(model, pb, CFG, pf, init), pop.nu_mean)
    assert abs(pop.nu_mean.sum() - 1.0) < 1e-12


def test_moment_errors():
    model, pb, pe, _ = _case()
    pf, ph = _maps()
    empty = generate_offline_dataset(model, pb, 0, 0, CFG, seed=0)
    with pytest.raises(ConfigurationError):
        compute_moments_empirical(empty, pf, ph, pe, pb, 0.8)
    no_init = generate_offline_dataset(model, pb, 5, 0, CFG, seed=0)
    with pytest.raises(ConfigurationError):
        compute_moments_empirical(no_init, pf, ph, pe, pb, 0.8)
    with pytest.raises(ConfigurationError):
        compute_moments_empirical(no_init, ph, pf, pe, pb, 0.8, nu_mean=np.zeros(3))
    with pytest.raises(ConfigurationError):
        EstimatorConfig(lam=-1.0)


# -- linear closed form ---------------------------------------------------------------

def _square_moments(seed=0, d=4):
    rng = np.random.default_rng(seed)
    m2 = rng.normal(size=(d, d)) + 3 * np.eye(d)
    a = rng.normal(size=(d, d))
    return MomentSet(rng.normal(size=d), m2, a @ a.T + np.eye(d), rng.normal(size=d), 0.9, "test", 1)


def test_invertible_m2_gives_inverse_for_every_critic_weight():
    mom = _square_moments()
    w0 = np.linalg.solve(mom.m2, mom.m1)
    for lam, alpha in ((0.0, 0.0), (1.0, 0.0), (0.3, 2.0)):
        est = minimax_linear(mom, EstimatorConfig(lam, alpha))
        assert np.allclose(est.coefficients, w0, atol=1e-10)
        assert est.residual_norm < 1e-18


def test_ridge_shrinks_toward_zero():
    mom = _square_moments(1)
    norms = [np.linalg.norm(minimax_linear(mom, EstimatorConfig(1.0, 0.0, ap)).coefficients) for ap in (0, 1, 100)]
    assert norms[0] > norms[1] > norms[2]


def test_population_minimax_is_exact():
    for seed in range(3):
        model, _, pe, init, mom = _population(seed)
        est = minimax_linear(mom, EstimatorConfig.exact())
        assert abs(est.j_hat - exact_policy_value(model, pe, init)) < 1e-10
        assert projected_residual(mom, est.coefficients) < 1e-20


def test_reward_scaling_is_linear():
    model, pb, pe, init = _case(4)
    pf, ph = _maps()
    j = []
    for c in (1.0, -2.5):
        scaled = model.with_reward(c * model.reward)
        j.append(minimax_linear(compute_moments_population(scaled, pb, pe, pf, ph, CFG, init)).j_hat)
    assert np.isclose(j[1], -2.5 * j[0], rtol=1e-10)


def test_linear_inner_max_cases():
    mom = _square_moments(2)
    w = np.zeros(4)
    z = mom.m1
    assert np.isclose(linear_inner_max(mom, w, 2.0), z @ np.linalg.solve(mom.m3, z) / 8.0)
    assert linear_inner_max(mom, w, 0.0) == float("inf")
    assert linear_inner_max(mom, np.linalg.solve(mom.m2, mom.m1), 0.0) == 0.0


# -- finite horizon -------------------------------------------------------------------

def test_finite_horizon_recursion():
    model, _, pe, init, mom = _population(5)
    est = finite_horizon_linear(mom, 4)
    thetas = est.extras["thetas"]
    assert len(thetas) == 5 and np.all(thetas[-1] == 0)
    assert np.allclose(thetas[-2], np.linalg.pinv(mom.g) @ mom.m1)
    assert abs(est.j_hat - exact_finite_horizon_value(model, pe, init, 4)) < 1e-10
    long = finite_horizon_linear(mom, 400).j_hat
    assert abs(long - minimax_linear(mom, EstimatorConfig.exact()).j_hat) < 1e-9
    with pytest.raises(ConfigurationError):
        finite_horizon_linear(mom, 0)


# -- RKHS -----------------------------------------------------------------------------

def test_rkhs_linear_kernel_matches_closed_form():
    model, pb, pe, init = _case(6)
    pf, ph = _maps()
    ds = generate_offline_dataset(model, pb, 300, 50, CFG, seed=7, init_table=init)
    cfg = EstimatorConfig(1.0, 0.0, 0.0)
    closed = minimax_linear(compute_moments_empirical(ds, pf, ph, pe, pb, model.gamma), cfg)
    rkhs = minimax_rkhs(ds, linear_kernel("fbar", pf), linear_kernel("history", ph), cfg, pe, pb, model.gamma)
    assert abs(rkhs.j_hat - closed.j_hat) < 1e-8


def test_rkhs_duplicate_points_leave_estimate_unchanged():
    model, pb, pe, init = _case(7)
    ds = generate_offline_dataset(model, pb, 40, 10, CFG, seed=1, init_table=init)
    idx = np.concatenate([np.arange(ds.n), np.arange(ds.n)])
    doubled = ds.subset(idx)
    cfg = EstimatorConfig(1.0, 0.0, 0.0)
    kf, kh = gaussian_kernel("fbar", 1.0), gaussian_kernel("history", 1.0)
    a = minimax_rkhs(ds, kf, kh, cfg, pe, pb, model.gamma).j_hat
    b = minimax_rkhs(doubled, kf, kh, cfg, pe, pb, model.gamma).j_hat
    assert abs(a - b) < 1e-8


def test_rkhs_gamma_zero_fits_immediate_reward():
    model, pb, _, init = _case(8)
    ds = generate_offline_dataset(model, pb, 5, 5, CFG, seed=2, init_table=init)
    est = minimax_rkhs(ds, gaussian_kernel("fbar"), gaussian_kernel("history"), EstimatorConfig(1.0), pb, pb, 0.0)
    assert np.isfinite(est.j_hat) and all(h > 0 for h in est.extras["bandwidths"])
    with pytest.raises(ConfigurationError):
        minimax_rkhs(ds, gaussian_kernel("fbar"), gaussian_kernel("history"), EstimatorConfig.exact(), pb, pb, 0.0)


# -- enumeration ----------------------------------------------------------------------

def test_enumeration_single_candidate():
    model, pb, pe, init = _case(9)
    ds = generate_offline_dataset(model, pb, 50, 5, CFG, seed=3, init_table=init)
    pf, ph = _maps()
    q = linear_function([1.0, 2.0, 3.0], pf)
    est = minimax_enumerate(ds, [q], [linear_function(np.zeros(6), ph)], EstimatorConfig(), pe, pb, model.gamma)
    assert est.extras["index"] == 0
    assert np.isclose(est.j_hat, np.mean(q(ds.init_fbar())))


def test_enumeration_selects_learnable_value_function():
    model, pb, pe, init = _case(10)
    pf, ph = _maps()
    ds = population_dataset(model, pb, CFG, init)
    mom = compute_moments_population(model, pb, pe, pf, ph, CFG, init)
    w = minimax_linear(mom, EstimatorConfig.exact()).coefficients
    candidates = [w] + [w + s * e for e in np.eye(3) for s in (-1.0, 1.0)]
    q_class = [linear_function(c, pf) for c in candidates]
    xi_class = [linear_function(s * 0.01 * e, ph) for e in np.eye(6) for s in (-1.0, 1.0)]
    est = minimax_enumerate(ds, q_class, xi_class, EstimatorConfig(1.0), pe, pb, model.gamma)
    assert est.extras["index"] == 0
    assert abs(est.j_hat - exact_policy_value(model, pe, init)) < 1e-10


def test_enumeration_guards():
    model, pb, pe, init = _case(11)
    ds = generate_offline_dataset(model, pb, 5, 5, CFG, seed=3, init_table=init)
    pf, ph = _maps()
    with pytest.raises(ConfigurationError):
        minimax_enumerate(ds, [], [linear_function(np.zeros(6), ph)], EstimatorConfig(), pe, pb, 0.8)
    q_class, coefs = grid_linear_class(pf, [5.0, 10.0])
    assert coefs.shape == (8, 3)
    with pytest.raises(ConfigurationError):
        minimax_enumerate(ds, q_class, [linear_function(np.zeros(6), ph)], EstimatorConfig(), pe, pb, 0.8,
                          q_bound=1.0)


# -- SIS ------------------------------------------------------------------------------

def test_sis_identical_policies_has_unit_weights():
    model, pb, _, init = _case(12)
    traj = simulate_tabular(model, pb, 200, 10, np.random.default_rng(0), init_table=init)
    res = sis_estimate(traj, pb, pb, model.gamma)
    assert res.weight_variance == 0.0 and res.log_weight_variance == -np.inf
    disc = model.gamma ** np.arange(10)
    assert np.isclose(res.j_hat, np.mean(traj.rewards @ disc))


def test_sis_is_unbiased():
    model, pb, pe, init = _case(13, gamma=0.5)
    traj = simulate_tabular(model, pb, 50_000, 6, np.random.default_rng(1), init_table=init)
    res = sis_estimate(traj, pe, pb, model.gamma)
    truth = exact_finite_horizon_value(model, pe, init, 6)
    assert abs(res.j_hat - truth) < 5 * res.stderr
    assert res.horizon == 6 and sis_estimate(traj, pe, pb, model.gamma, horizon_cap=2).horizon == 2
