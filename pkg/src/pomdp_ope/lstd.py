"""Classical off-policy LSTD for state-value functions of fully observed MDPs.

Kept deliberately separate from the estimator module: it works on raw
``(s, a, r, s')`` samples with explicit loops so it can serve as an
independent reference.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, OverlapError


def lstd_q_weights(states, actions, rewards, next_states, pi_e, pi_b, gamma, n_states, weights=None):
    """Solve ``sum_i w_i phi_i (phi_i - gamma rho_i phi'_i)' theta = sum_i w_i rho_i r_i phi_i``.

    ``phi`` is the one-hot state encoding, ``rho_i = pi_e(a_i|s_i) / pi_b(a_i|s_i)``;
    ``pi_e`` and ``pi_b`` are (n_states, n_actions) tables.
    """
    n = len(states)
    if n == 0:
        raise ConfigurationError("LSTD needs at least one sample")
    if weights is None:
        weights = [1.0 / n] * n
    a_mat = np.zeros((n_states, n_states))
    b_vec = np.zeros(n_states)
    for i in range(n):
        s, a, s2 = int(states[i]), int(actions[i]), int(next_states[i])
        pe, pb = pi_e[s][a], pi_b[s][a]
        if pb == 0:
            if pe > 0:
                raise OverlapError(f"behavior policy never takes action {a} in state {s}")
            rho = 0.0
        else:
            rho = pe / pb
        wi = weights[i]
        a_mat[s, s] += wi
        a_mat[s, s2] -= wi * gamma * rho
        b_vec[s] += wi * rho * rewards[i]
    return np.linalg.pinv(a_mat, rcond=1e-10) @ b_vec


def lstd_value(states, actions, rewards, next_states, initial_states, pi_e, pi_b, gamma, n_states,
               weights=None, initial_weights=None) -> float:
    """Off-policy LSTD estimate of the policy value, averaged over ``initial_states``."""
    theta = lstd_q_weights(states, actions, rewards, next_states, pi_e, pi_b, gamma, n_states, weights)
    m = len(initial_states)
    if m == 0:
        raise ConfigurationError("LSTD needs at least one initial state")
    if initial_weights is None:
        initial_weights = [1.0 / m] * m
    total = 0.0
    for s, w in zip(initial_states, initial_weights):
        total += w * theta[int(s)]
    return float(total)
