"""Exact population laws of tuples, as weighted datasets.

Every observable tuple ``(H, O, A, F')`` with positive probability under the
behavior-stationary law is enumerated with its exact probability as weight
and ``E[R | observables]`` as reward, so the moment code used for empirical
data gives exact expectations when fed these weights.
"""
from __future__ import annotations

import numpy as np

from .data import OfflineDataset, WindowConfig
from .errors import CapacityError, ConfigurationError
from .model import MemoryPolicy, TabularPOMDP, decode_window
from .oracles import behavior_stationary_distribution, burn_in_initial_distribution

MAX_ENTRIES = 20_000_000


def _check_capacity(rows: int, model: TabularPOMDP, steps: int) -> None:
    worst = rows * model.n_states * (model.n_pairs ** steps)
    if worst > MAX_ENTRIES:
        raise CapacityError(f"exact enumeration needs up to {worst} table entries (limit {MAX_ENTRIES})", required=worst)


def expand_futures(model: TabularPOMDP, policy: MemoryPolicy, z_codes, mass, memory: int, n_obs_steps: int,
                   track_reward: bool = False):
    """Enumerate ``n_obs_steps`` observations and the actions between them.

    ``mass[i, s]`` is the probability of starting row ``i`` with latent state
    ``s``; ``z_codes[i]`` its memory window (width ``memory``). Returns
    ``(parent, f_obs, f_act, mass, reward_mass)`` where ``parent`` maps each
    output row to its starting row and ``reward_mass[i, s] = E[R_0; row i, s]``
    (``None`` unless ``track_reward``). Zero-probability rows are dropped.
    """
    n_o, n_a, n_s, k = model.n_obs, model.n_actions, model.n_states, model.n_pairs
    if policy.memory > memory:
        raise ConfigurationError("policy memory exceeds the window memory")
    _check_capacity(len(z_codes), model, n_obs_steps)
    parent = np.arange(len(z_codes))
    z = np.asarray(z_codes, dtype=np.int64)
    mass = np.asarray(mass, dtype=float)
    rmass = np.zeros_like(mass) if track_reward else None
    obs_cols, act_cols = [], []
    zmod = k ** policy.memory
    for j in range(n_obs_steps):
        n = len(parent)
        mass = (mass[:, None, :] * model.emission.T[None, :, :]).reshape(n * n_o, n_s)
        if rmass is not None:
            rmass = (rmass[:, None, :] * model.emission.T[None, :, :]).reshape(n * n_o, n_s)
        parent, z = np.repeat(parent, n_o), np.repeat(z, n_o)
        obs_cols = [np.repeat(c, n_o) for c in obs_cols] + [np.tile(np.arange(n_o), n)]
        act_cols = [np.repeat(c, n_o) for c in act_cols]
        keep = mass.sum(axis=1) > 0
        parent, z, mass = parent[keep], z[keep], mass[keep]
        obs_cols, act_cols = [c[keep] for c in obs_cols], [c[keep] for c in act_cols]
        if rmass is not None:
            rmass = rmass[keep]
        if j == n_obs_steps - 1:
            break
        n, o = len(parent), obs_cols[-1]
        pol = policy.table[z % zmod, o]                                  # (n, A)
        mass = mass[:, None, :] * pol[:, :, None]                        # (n, A, S)
        if rmass is not None:
            rmass = rmass[:, None, :] * pol[:, :, None]
            if j == 0:
                rmass = rmass + mass * model.reward.T[None, :, :]
        parent, z, o = np.repeat(parent, n_a), np.repeat(z, n_a), np.repeat(o, n_a)
        acts = np.tile(np.arange(n_a), n)
        obs_cols = [np.repeat(c, n_a) for c in obs_cols]
        act_cols = [np.repeat(c, n_a) for c in act_cols] + [acts]
        if memory:
            z = (z * k + o * n_a + acts) % (k ** memory)
        # transition: S' given (S, A)
        trans = model.transition[:, acts, :].transpose(1, 0, 2)         # (n*A, S, S')
        mass = np.einsum("ns,nst->nt", mass.reshape(n * n_a, n_s), trans)
        if rmass is not None:
            rmass = np.einsum("ns,nst->nt", rmass.reshape(n * n_a, n_s), trans)
        keep = mass.sum(axis=1) > 0
        parent, z, mass = parent[keep], z[keep], mass[keep]
        obs_cols, act_cols = [c[keep] for c in obs_cols], [c[keep] for c in act_cols]
        if rmass is not None:
            rmass = rmass[keep]
    f_obs = np.stack(obs_cols, axis=1)
    f_act = np.stack(act_cols, axis=1) if act_cols else np.zeros((len(parent), 0), dtype=np.int64)
    return parent, f_obs, f_act, mass, rmass


def initial_fbar_law(model: TabularPOMDP, policy_b: MemoryPolicy, config: WindowConfig, init_table=None):
    """Exact law of ``F_bar_0 = (Z_0, F_0)``; returns (z_obs, z_act, f_obs, f_act, prob).

    The start ``(Z_0, S_0)`` follows ``init_table`` when given, else the
    padded burn-in law of :func:`burn_in_initial_distribution`.
    """
    m = config.m
    policy = policy_b.with_memory(m) if policy_b.memory < m else policy_b
    if init_table is None:
        table = burn_in_initial_distribution(model, policy)
    else:
        table = np.asarray(init_table, dtype=float)
        if table.shape != (model.n_pairs ** m, model.n_states):
            raise ConfigurationError(f"init_table must have shape ({model.n_pairs ** m}, {model.n_states})")
    rows = np.flatnonzero(table.sum(axis=1) > 0)
    parent, f_obs, f_act, mass, _ = expand_futures(model, policy, rows, table[rows], m, config.m_f)
    z = rows[parent]
    z_obs, z_act = decode_window(z, m, model.n_obs, model.n_actions)
    return z_obs, z_act, f_obs, f_act, mass.sum(axis=1)


def population_dataset(model: TabularPOMDP, policy_b: MemoryPolicy, config: WindowConfig,
                       init_table=None) -> OfflineDataset:
    """Every positive-probability tuple, weighted by its behavior-stationary probability."""
    policy_b.check_compatible(model)
    if policy_b.memory > config.m:
        raise ConfigurationError(f"behavior policy memory {policy_b.memory} exceeds window memory M={config.m}")
    k = model.n_pairs
    _check_capacity(k ** config.m_h, model, config.m_f + 1)
    stat = behavior_stationary_distribution(model, policy_b, config.m_h)
    rows = np.flatnonzero(stat.sum(axis=1) > 0)
    parent, fut_obs, fut_act, mass, rmass = expand_futures(
        model, policy_b, rows, stat[rows], config.m_h, config.m_f + 1, track_reward=True)
    weights = mass.sum(axis=1)
    rewards = rmass.sum(axis=1) / weights
    h_obs, h_act = decode_window(rows[parent], config.m_h, model.n_obs, model.n_actions)
    z_obs, z_act, f_obs, f_act, w0 = initial_fbar_law(model, policy_b, config, init_table)
    return OfflineDataset(config, model.n_obs, model.n_actions, h_obs, h_act, fut_obs, fut_act, rewards,
                          z_obs, z_act, f_obs, f_act, weights, w0,
                          provenance={"mode": "population", "initial": "explicit-table" if init_table is not None else "burn-in"})
