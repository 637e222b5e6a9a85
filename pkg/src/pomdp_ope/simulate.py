"""Trajectory sampling for tabular POMDPs and LQG systems.

Sampling is vectorized across independent trajectories; all randomness comes
from a ``numpy.random.Generator`` seeded by the caller.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .model import LQGModel, MemoryPolicy, TabularPOMDP


@dataclass(frozen=True)
class Trajectory:
    """One trajectory. For tabular models entries are integer symbols.

    ``prefix_obs`` / ``prefix_acts`` hold the M pairs preceding step 0 (Z_0).
    """

    states: np.ndarray
    obs: np.ndarray
    acts: np.ndarray
    rewards: np.ndarray
    prefix_obs: np.ndarray
    prefix_acts: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)


@dataclass(frozen=True)
class TrajectoryBatch:
    """``n`` trajectories of equal length stacked along axis 0."""

    states: np.ndarray
    obs: np.ndarray
    acts: np.ndarray
    rewards: np.ndarray
    prefix_obs: np.ndarray
    prefix_acts: np.ndarray

    def __len__(self) -> int:
        return self.rewards.shape[0]

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(self.states[i], self.obs[i], self.acts[i], self.rewards[i],
                          self.prefix_obs[i], self.prefix_acts[i])


def categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One draw per row of ``probs`` (rows sum to 1)."""
    probs = np.atleast_2d(probs)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=1), probs.shape[1] - 1)


def step_tabular(model: TabularPOMDP, policy: MemoryPolicy, z_codes, states, rng):
    """Emit, act, reward and transition once for every row."""
    obs = categorical(rng, model.emission[states])
    acts = categorical(rng, policy.table[z_codes, obs])
    rewards = model.reward[states, acts]
    nxt = categorical(rng, model.transition[states, acts])
    return obs, acts, rewards, nxt


def _initial_tabular(model, policy, n, rng, burn_in, init_table):
    m, k = policy.memory, model.n_pairs
    if init_table is not None:
        table = np.asarray(init_table, dtype=float)
        if table.shape != (k ** m, model.n_states):
            raise ConfigurationError(f"init_table must have shape ({k ** m}, {model.n_states})")
        flat = categorical(rng, np.broadcast_to(table.ravel(), (n, table.size)))
        z, s = flat // model.n_states, flat % model.n_states
        return z, s
    burn_in = m if burn_in is None else burn_in
    if burn_in < 0:
        raise ConfigurationError("burn_in must be >= 0")
    s = categorical(rng, np.broadcast_to(model.initial_state_dist, (n, model.n_states)))
    z = np.zeros(n, dtype=np.int64)
    for _ in range(burn_in):
        o, a, _, s = step_tabular(model, policy, z, s, rng)
        z = (z * k + o * model.n_actions + a) % (k ** m) if m else z
    return z, s


def simulate_tabular(model: TabularPOMDP, policy: MemoryPolicy, n: int, length: int,
                     rng: np.random.Generator, burn_in: int | None = None, init_table=None) -> TrajectoryBatch:
    """``n`` independent trajectories of ``length`` steps.

    Start: ``(Z_0, S_0)`` from ``init_table`` when given, else ``S`` from the
    model's initial distribution followed by ``burn_in`` (default M) discarded
    steps with the window pre-filled by the pair ``(0, 0)``.
    """
    policy.check_compatible(model)
    if length < 1:
        raise ConfigurationError("length must be >= 1")
    m, k, n_a = policy.memory, model.n_pairs, model.n_actions
    z, s = _initial_tabular(model, policy, n, rng, burn_in, init_table)
    prefix = np.zeros((n, m), dtype=np.int64)
    rest = z.copy()
    for i in range(m - 1, -1, -1):
        prefix[:, i] = rest % k
        rest //= k
    states = np.empty((n, length), dtype=np.int64)
    obs = np.empty_like(states)
    acts = np.empty_like(states)
    rewards = np.empty((n, length))
    for t in range(length):
        states[:, t] = s
        o, a, r, s = step_tabular(model, policy, z, s, rng)
        obs[:, t], acts[:, t], rewards[:, t] = o, a, r
        if m:
            z = (z * k + o * n_a + a) % (k ** m)
    return TrajectoryBatch(states, obs, acts, rewards, prefix // n_a, prefix % n_a)


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """Factor ``L`` with ``L L' = cov`` that tolerates singular covariances."""
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _lqg_action(policy: MemoryPolicy, o, z_flat, rng):
    x = np.concatenate([o, z_flat], axis=1)
    a = x @ policy.gain.T
    if policy.noise_std > 0:
        a = a + policy.noise_std * rng.standard_normal(a.shape)
    return a


def simulate_lqg(model: LQGModel, policy: MemoryPolicy, n: int, length: int,
                 rng: np.random.Generator, burn_in: int | None = None) -> TrajectoryBatch:
    """LQG rollouts with a linear-gain policy acting on ``[o_t, z_t]``."""
    m, dx, du, dy = policy.memory, model.state_dim, model.action_dim, model.obs_dim
    if policy.kind != "linear-gain" or policy.gain.shape != (du, dy + m * (dy + du)):
        raise ConfigurationError("LQG needs a linear-gain policy of shape (action_dim, obs_dim + M*(obs_dim+action_dim))")
    burn_in = 10 * max(m, 1) if burn_in is None else burn_in
    chol_s = _psd_sqrt(model.noise_cov_state)
    chol_o = _psd_sqrt(model.noise_cov_obs)
    init_chol = _psd_sqrt(model.initial_cov)
    s = model.initial_mean + rng.standard_normal((n, dx)) @ init_chol.T
    z_obs = np.zeros((n, m, dy))
    z_act = np.zeros((n, m, du))
    states = np.empty((n, length, dx))
    obs = np.empty((n, length, dy))
    acts = np.empty((n, length, du))
    rewards = np.empty((n, length))
    prefix = (z_obs, z_act)
    for t in range(-burn_in, length):
        if t == 0:
            prefix = (z_obs.copy(), z_act.copy())
        o = s @ model.C.T + rng.standard_normal((n, dy)) @ chol_o.T
        z_flat = np.concatenate([z_obs.reshape(n, -1), z_act.reshape(n, -1)], axis=1)
        a = _lqg_action(policy, o, z_flat, rng)
        r = -np.einsum("ni,ij,nj->n", s, model.Q, s) - np.einsum("ni,ij,nj->n", a, model.R, a)
        if t >= 0:
            states[:, t], obs[:, t], acts[:, t], rewards[:, t] = s, o, a, r
        if m:
            z_obs = np.concatenate([z_obs[:, 1:], o[:, None]], axis=1)
            z_act = np.concatenate([z_act[:, 1:], a[:, None]], axis=1)
        s = s @ model.A.T + a @ model.B.T + rng.standard_normal((n, dx)) @ chol_s.T
    return TrajectoryBatch(states, obs, acts, rewards, prefix[0], prefix[1])


def sample_trajectory(model, policy: MemoryPolicy, length: int, seed: int,
                      burn_in: int | None = None, init_table=None) -> Trajectory:
    """Single seeded trajectory (see :func:`simulate_tabular` for the start protocol)."""
    rng = np.random.default_rng(seed)
    if isinstance(model, LQGModel):
        if init_table is not None:
            raise ConfigurationError("explicit initial tables are tabular-only")
        return simulate_lqg(model, policy, 1, length, rng, burn_in)[0]
    return simulate_tabular(model, policy, 1, length, rng, burn_in, init_table)[0]


def monte_carlo_value(model, policy: MemoryPolicy, n_rollouts: int, horizon: int, seed: int,
                      burn_in: int | None = None, init_table=None, batch: int = 100_000):
    """Mean and standard error of truncated discounted returns."""
    rng = np.random.default_rng(seed)
    disc = model.gamma ** np.arange(horizon)
    totals = []
    left = n_rollouts
    while left > 0:
        size = min(batch, left)
        if isinstance(model, LQGModel):
            traj = simulate_lqg(model, policy, size, horizon, rng, burn_in)
        else:
            traj = simulate_tabular(model, policy, size, horizon, rng, burn_in, init_table)
        totals.append(traj.rewards @ disc)
        left -= size
    returns = np.concatenate(totals)
    return float(returns.mean()), float(returns.std(ddof=1) / np.sqrt(len(returns)))
