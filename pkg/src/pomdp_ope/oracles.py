"""Exact ground-truth quantities for tabular POMDPs.

Every function here solves an explicit Markov chain over augmented states
``(w, s)`` where ``w`` is the code of the last W observation-action pairs
(see :mod:`pomdp_ope.model`). Flat index of ``(w, s)`` is ``w * n_states + s``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse

from .errors import ConfigurationError, NumericalError
from .linalg import solve_checked
from .model import MemoryPolicy, TabularPOMDP

DENSE_SOLVE_LIMIT = 4000
STATIONARY_TOL = 1e-10


@dataclass(frozen=True)
class WindowChain:
    """Markov chain over (width-W window, latent state) under a fixed policy."""

    width: int
    n_states: int
    n_pairs: int
    matrix: scipy.sparse.csr_matrix
    reward: np.ndarray

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def _policy_over_windows(policy: MemoryPolicy, width: int, n_pairs: int) -> np.ndarray:
    """``pi(a | z(w), o)`` for every window code ``w``; shape (K^W, O, A)."""
    if policy.memory > width:
        raise ConfigurationError(f"window width {width} shorter than policy memory {policy.memory}")
    codes = np.arange(n_pairs ** width, dtype=np.int64)
    z = codes % (n_pairs ** policy.memory)
    return policy.table[z]


def window_chain(model: TabularPOMDP, policy: MemoryPolicy, width: int) -> WindowChain:
    """Transition matrix and expected one-step reward over ``(w, s)``."""
    policy.check_compatible(model)
    n_s, n_a, k = model.n_states, model.n_actions, model.n_pairs
    n_w = k ** width
    pol = _policy_over_windows(policy, width, k)                      # (W, O, A)
    # P[w, s, o, a, s'] = O(o|s) pi(a|z,o) T(s'|s,a)
    act = pol[:, None, :, :] * model.emission[None, :, :, None]       # (W, S, O, A)
    probs = act[..., None] * model.transition[None, :, None, :, :]    # (W, S, O, A, S')
    w, s, o, a, s2 = np.indices(probs.shape, sparse=True)
    pair = o * n_a + a
    nxt_w = (w * k + pair) % n_w if width else np.zeros_like(w)
    rows = np.broadcast_to(w * n_s + s, probs.shape).ravel()
    cols = np.broadcast_to(nxt_w * n_s + s2, probs.shape).ravel()
    vals = probs.ravel()
    keep = vals > 0
    size = n_w * n_s
    mat = scipy.sparse.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(size, size)).tocsr()
    reward = np.einsum("wsoa,sa->ws", act, model.reward).ravel()
    return WindowChain(width, n_s, k, mat, reward)


def _solve(a, b):
    if a.shape[0] <= DENSE_SOLVE_LIMIT:
        return solve_checked(a.toarray(), b)
    return solve_checked(a.tocsc(), b)


def _as_init(init_dist, n_z: int, n_states: int) -> np.ndarray:
    init = np.asarray(init_dist, dtype=float)
    if init.shape == (n_z, n_states):
        init = init.ravel()
    if init.shape != (n_z * n_states,):
        raise ConfigurationError(f"init_dist must have shape ({n_z}, {n_states})")
    if abs(init.sum() - 1.0) > 1e-10 or np.any(init < 0):
        raise ConfigurationError("init_dist is not a probability table")
    return init


def value_function(model: TabularPOMDP, policy_e: MemoryPolicy) -> np.ndarray:
    """``V(z, s)`` as an array of shape (K^M, S)."""
    chain = window_chain(model, policy_e, policy_e.memory)
    lhs = scipy.sparse.identity(chain.size, format="csr") - model.gamma * chain.matrix
    return _solve(lhs, chain.reward).reshape(-1, model.n_states)


def exact_policy_value(model: TabularPOMDP, policy_e: MemoryPolicy, init_dist) -> float:
    """Discounted value ``E_init[V(z, s)]`` from the Bellman linear system."""
    v = value_function(model, policy_e)
    init = _as_init(init_dist, v.shape[0], model.n_states)
    return float(init @ v.ravel())


def finite_horizon_values(model: TabularPOMDP, policy_e: MemoryPolicy, horizon: int) -> list[np.ndarray]:
    """``[V_0, ..., V_T]`` where ``V_t`` is the value with ``T - t`` steps to go (``V_T = 0``)."""
    if horizon < 1:
        raise ConfigurationError("horizon T must be >= 1")
    chain = window_chain(model, policy_e, policy_e.memory)
    values = [np.zeros(chain.size)]
    for _ in range(horizon):
        values.append(chain.reward + model.gamma * (chain.matrix @ values[-1]))
    return [v.reshape(-1, model.n_states) for v in values[::-1]]


def exact_finite_horizon_value(model: TabularPOMDP, policy_e: MemoryPolicy, init_dist, horizon: int) -> float:
    """``E[sum_{k<T} gamma^k R_k]`` by backward dynamic programming."""
    v0 = finite_horizon_values(model, policy_e, horizon)[0]
    init = _as_init(init_dist, v0.shape[0], model.n_states)
    return float(init @ v0.ravel())


def behavior_stationary_distribution(model: TabularPOMDP, policy_b: MemoryPolicy, width: int,
                                     max_iter: int = 200_000, tol: float = STATIONARY_TOL) -> np.ndarray:
    """Stationary law of ``(last-W pairs, s)`` under ``policy_b``; shape (K^W, S).

    Power iteration on the lazy chain ``(I + P) / 2``, which has the same
    stationary law and is aperiodic.
    """
    chain = window_chain(model, policy_b, width)
    pt = chain.matrix.T.tocsr()
    dist = np.full(chain.size, 1.0 / chain.size)
    resid = np.inf
    for it in range(max_iter):
        step = pt @ dist
        if it % 16 == 0:
            resid = float(np.abs(step - dist).sum())
            if resid <= tol * 1e-3:
                break
        dist = 0.5 * (dist + step)
        dist /= dist.sum()
    resid = float(np.abs(pt @ dist - dist).sum())
    if resid > tol:
        raise NumericalError(f"stationary distribution did not converge (residual {resid:.3e})")
    dist = np.clip(dist, 0.0, None)
    return (dist / dist.sum()).reshape(-1, model.n_states)


def marginal_window(dist: np.ndarray, width: int, keep: int, n_pairs: int) -> np.ndarray:
    """Marginal over the last ``keep`` pairs of a (K^W, S) table."""
    codes = np.arange(dist.shape[0]) % (n_pairs ** keep)
    out = np.zeros((n_pairs ** keep, dist.shape[1]))
    np.add.at(out, codes, dist)
    return out


def burn_in_initial_distribution(model: TabularPOMDP, policy: MemoryPolicy, steps: int | None = None) -> np.ndarray:
    """Law of ``(Z_0, S_0)`` after a burn-in of ``steps`` (default M) steps.

    The memory window starts filled with the pair ``(0, 0)``, the latent state
    from ``initial_state_dist``.
    """
    m = policy.memory
    steps = m if steps is None else steps
    chain = window_chain(model, policy, m)
    dist = np.zeros(chain.size)
    dist[: model.n_states] = model.initial_state_dist
    pt = chain.matrix.T.tocsr()
    for _ in range(steps):
        dist = pt @ dist
    return dist.reshape(-1, model.n_states)


def stationary_initial_distribution(model: TabularPOMDP, policy_b: MemoryPolicy, memory: int | None = None) -> np.ndarray:
    """Behavior-stationary law of ``(z, s)`` with a width-M window."""
    m = policy_b.memory if memory is None else memory
    return behavior_stationary_distribution(model, policy_b.with_memory(max(m, policy_b.memory)), m)


def discounted_occupancy(model: TabularPOMDP, policy_e: MemoryPolicy, init_dist) -> np.ndarray:
    """``(1 - gamma) sum_t gamma^t d_t`` over ``(z, s)``; shape (K^M, S)."""
    chain = window_chain(model, policy_e, policy_e.memory)
    init = _as_init(init_dist, chain.size // model.n_states, model.n_states)
    lhs = scipy.sparse.identity(chain.size, format="csr") - model.gamma * chain.matrix.T
    d = _solve(lhs.tocsr(), (1.0 - model.gamma) * init)
    return d.reshape(-1, model.n_states)


def _check_memoryless(policy: MemoryPolicy) -> None:
    if policy.memory != 0:
        raise ConfigurationError("sequence probabilities need a memory-less policy")


def _forward(model: TabularPOMDP, policy_e: MemoryPolicy, sequence, initial=None) -> np.ndarray:
    _check_memoryless(policy_e)
    policy_e.check_compatible(model)
    alpha = model.initial_state_dist.copy() if initial is None else np.asarray(initial, float).copy()
    for o, a in sequence:
        if not (0 <= o < model.n_obs and 0 <= a < model.n_actions):
            raise ConfigurationError(f"symbol ({o}, {a}) out of range")
        alpha = (alpha * model.emission[:, o] * policy_e.table[0, o, a]) @ model.transition[:, a, :]
    return alpha


def joint_sequence_probability(model: TabularPOMDP, policy_e: MemoryPolicy, sequence, initial=None) -> float:
    """``Pr(o_0, a_0, ..., o_{T-1}, a_{T-1})`` under a memory-less policy (forward algorithm)."""
    return float(_forward(model, policy_e, sequence, initial).sum())


def predictive_distribution(model: TabularPOMDP, policy_e: MemoryPolicy, sequence, initial=None) -> np.ndarray:
    """``Pr(O_T = . | o_0, a_0, ..., a_{T-1})``."""
    alpha = _forward(model, policy_e, sequence, initial)
    total = alpha.sum()
    if total <= 0:
        raise NumericalError("conditioning sequence has probability zero")
    return (alpha @ model.emission) / total
