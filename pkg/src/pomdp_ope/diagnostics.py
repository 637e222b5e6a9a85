"""Identification and conditioning diagnostics for tabular models.

``S_bar_b`` is the set of augmented latent states ``(z, s)`` (``z`` the last M
pairs) with positive behavior-stationary mass. Condition numbers are computed
for the linear class with one-hot ``phi_S_bar`` on ``S_bar_b``, where every
supremum becomes a generalized Rayleigh quotient.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import FbarBatch, HistoryBatch, OfflineDataset, WindowConfig
from .errors import ConfigurationError
from .features import FeatureMap, one_hot_fbar, one_hot_history
from .linalg import RANK_RTOL, generalized_rayleigh_sup, numerical_rank, pinv, singular_values
from .model import MemoryPolicy, TabularPOMDP, decode_window
from .oracles import (behavior_stationary_distribution, burn_in_initial_distribution, discounted_occupancy,
                      marginal_window, value_function)
from .population import _check_capacity, expand_futures

SUPPORT_TOL = 1e-12


@dataclass(frozen=True)
class ProbabilityMatrices:
    """Exact behavior-stationary matrices; ``support`` lists ``S_bar_b`` as flat ``z * S + s`` indices."""

    fbar_history: np.ndarray          # Pr(F_bar, H), |F_bar| x |H|
    fbar_given_state: np.ndarray      # Pr(F_bar | S_bar_b), |F_bar| x |S_bar_b|
    state_history: np.ndarray         # Pr(S_bar_b, H), |S_bar_b| x |H|
    support: np.ndarray
    state_mass: np.ndarray            # P_b(S_bar_b)

    @property
    def s_bar_b_size(self) -> int:
        return len(self.support)


@dataclass(frozen=True)
class ConditionReport:
    s_bar_b_size: int
    rank_f_given_s: int
    sigma_min_f_given_s: float
    rank_s_h: int
    sigma_min_s_h: float
    rank_f_h: int
    observable: bool
    invertible: bool
    identified: bool
    iff_holds: bool
    overlap_max: float = math.nan
    mu_max: float = math.nan
    iv1: float = math.nan
    iv2: float = math.nan
    dr: float = math.nan
    kappa: float = math.nan
    relative_condition_number: float = math.nan
    rank_tolerance: float = RANK_RTOL
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, float) and not math.isfinite(v):
                out[k] = "inf" if v > 0 else ("nan" if math.isnan(v) else "-inf")
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _window_policy(policy: MemoryPolicy, m: int) -> MemoryPolicy:
    if policy.memory > m:
        raise ConfigurationError(f"policy memory {policy.memory} exceeds window memory M={m}")
    return policy.with_memory(m) if policy.memory < m else policy


def behavior_support(model: TabularPOMDP, policy_b: MemoryPolicy, config: WindowConfig):
    """``(support, mass, stationary)``: flat ``(z, s)`` indices in ``S_bar_b``, their mass, and the width-M_H law."""
    stat = behavior_stationary_distribution(model, policy_b, config.m_h)
    zs = marginal_window(stat, config.m_h, config.m, model.n_pairs).ravel()
    support = np.flatnonzero(zs > SUPPORT_TOL)
    return support, zs[support], stat


def future_given_state(model: TabularPOMDP, policy_b: MemoryPolicy, config: WindowConfig, support) -> np.ndarray:
    """``Pr(F_bar | z, s)`` for each flat ``(z, s)`` in ``support``; shape (|F_bar|, len(support))."""
    pol = _window_policy(policy_b, config.m)
    n_s = model.n_states
    z = support // n_s
    mass = np.zeros((len(support), n_s))
    mass[np.arange(len(support)), support % n_s] = 1.0
    parent, f_obs, f_act, prob, _ = expand_futures(model, pol, z, mass, config.m, config.m_f)
    z_obs, z_act = decode_window(z[parent], config.m, model.n_obs, model.n_actions)
    phi = one_hot_fbar(config, model.n_obs, model.n_actions)
    idx = phi.index(FbarBatch(z_obs, z_act, f_obs, f_act))
    out = np.zeros((phi.dim, len(support)))
    np.add.at(out, (idx, parent), prob.sum(axis=1))
    return out


def probability_matrices(model: TabularPOMDP, policy_b: MemoryPolicy, config: WindowConfig) -> ProbabilityMatrices:
    """``Pr(F_bar, H) = Pr(F_bar | S_bar_b) Pr(S_bar_b, H)`` (futures and histories are independent given ``(Z, S)``)."""
    policy_b.check_compatible(model)
    k, n_s = model.n_pairs, model.n_states
    _check_capacity(k ** config.m_h, model, config.m_f)
    support, mass, stat = behavior_support(model, policy_b, config)
    n_h = k ** config.m_h
    h = np.arange(n_h)
    z_of_h = h % (k ** config.m)
    # columns follow the one-hot history ordering, not the window-code ordering
    h_obs, h_act = decode_window(h, config.m_h, model.n_obs, model.n_actions)
    col = one_hot_history(config, model.n_obs, model.n_actions).index(HistoryBatch(h_obs, h_act, h_obs[:, -1]))
    pos = {int(v): i for i, v in enumerate(support)}
    state_history = np.zeros((len(support), n_h))
    for s in range(n_s):
        flat = z_of_h * n_s + s
        rows = np.array([pos.get(int(f), -1) for f in flat])
        ok = rows >= 0
        state_history[rows[ok], col[ok]] = stat[h[ok], s]
    f_given_s = future_given_state(model, policy_b, config, support)
    return ProbabilityMatrices(f_given_s @ state_history, f_given_s, state_history, support, mass)


def direct_fbar_history(ds: OfflineDataset, phi_fbar: FeatureMap | None = None,
                        phi_h: FeatureMap | None = None) -> np.ndarray:
    """``Pr(F_bar, H)`` accumulated directly from a (population) dataset."""
    phi_fbar = phi_fbar or one_hot_fbar(ds.config, ds.n_obs, ds.n_actions)
    phi_h = phi_h or one_hot_history(ds.config, ds.n_obs, ds.n_actions)
    out = np.zeros((phi_fbar.dim, phi_h.dim))
    np.add.at(out, (phi_fbar.index(ds.fbar()), phi_h.index(ds.history())), ds.tuple_weights())
    return out


def _sigma_at(a: np.ndarray, k: int) -> float:
    """k-th largest singular value (0 when the matrix has fewer than k)."""
    s = singular_values(a)
    return float(s[k - 1]) if 0 < k <= s.size else 0.0


def rank_conditions(mats: ProbabilityMatrices, rtol: float = RANK_RTOL) -> ConditionReport:
    """Observability / invertibility ranks and the equivalence with ``rank Pr(F_bar, H) = |S_bar_b|``."""
    sb = mats.s_bar_b_size
    r_fs = numerical_rank(mats.fbar_given_state, rtol)
    r_sh = numerical_rank(mats.state_history, rtol)
    r_fh = numerical_rank(mats.fbar_history, rtol)
    observable, invertible = r_fs == sb, r_sh == sb
    identified = r_fh == sb
    return ConditionReport(
        s_bar_b_size=sb, rank_f_given_s=r_fs, sigma_min_f_given_s=_sigma_at(mats.fbar_given_state, sb),
        rank_s_h=r_sh, sigma_min_s_h=_sigma_at(mats.state_history, sb), rank_f_h=r_fh,
        observable=observable, invertible=invertible, identified=identified,
        iff_holds=(observable and invertible) == identified, rank_tolerance=rtol)


def _conditional_second_moment(mats: ProbabilityMatrices) -> np.ndarray:
    """``E[E[phi | H] E[phi | H]']`` for one-hot ``phi`` on ``S_bar_b``."""
    joint = mats.state_history
    p_h = joint.sum(axis=0)
    keep = p_h > 0
    return (joint[:, keep] / p_h[keep]) @ joint[:, keep].T


def condition_numbers(model: TabularPOMDP, policy_b: MemoryPolicy, policy_e: MemoryPolicy, config: WindowConfig,
                      init_table=None, mats: ProbabilityMatrices | None = None, rtol: float = RANK_RTOL) -> dict:
    """IV_1, IV_2 (unit-ball linear critic), Dr, kappa and density-ratio summaries.

    ``d_pi_e`` is the discounted occupancy of ``(Z, S)`` started from
    ``init_table`` (default: the padded burn-in law under the behavior policy).
    ``relative_condition_number`` is ``Dr^2``, the raw supremum.
    """
    mats = mats or probability_matrices(model, policy_b, config)
    pe = _window_policy(policy_e, config.m)
    pb = _window_policy(policy_b, config.m)
    init = burn_in_initial_distribution(model, pb) if init_table is None else np.asarray(init_table, float)
    occ = discounted_occupancy(model, pe, init).ravel()
    outside = occ.sum() - occ[mats.support].sum()
    p_b = np.diag(mats.state_mass)
    p_e = np.diag(occ[mats.support])
    cond = _conditional_second_moment(mats)
    iv1_sq = generalized_rayleigh_sup(p_b, cond, rtol)
    if outside > SUPPORT_TOL:
        dr_sq = kappa_sq = overlap = math.inf
    else:
        dr_sq = generalized_rayleigh_sup(p_e, p_b, rtol)
        kappa_sq = generalized_rayleigh_sup(p_e, cond, rtol)
        overlap = float(np.max(occ[mats.support] / mats.state_mass))
    cross = mats.state_history.T                      # E[phi_H phi_S_bar']
    iv2 = generalized_rayleigh_sup(p_b, cross.T @ cross, rtol)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(pb.table > 0, pe.table / np.where(pb.table > 0, pb.table, 1.0),
                         np.where(pe.table > 0, np.inf, 0.0))
    return {"iv1": math.sqrt(iv1_sq), "iv2": iv2, "dr": math.sqrt(dr_sq), "kappa": math.sqrt(kappa_sq),
            "relative_condition_number": dr_sq, "overlap_max": overlap, "mu_max": float(np.max(ratio))}


def diagnose(model: TabularPOMDP, policy_b: MemoryPolicy, policy_e: MemoryPolicy, config: WindowConfig,
             init_table=None, rtol: float = RANK_RTOL) -> ConditionReport:
    """Full report: ranks plus condition numbers."""
    mats = probability_matrices(model, policy_b, config)
    base = rank_conditions(mats, rtol)
    nums = condition_numbers(model, policy_b, policy_e, config, init_table, mats, rtol)
    notes = []
    if not base.observable:
        notes.append("observability fails: futures do not separate the behavior-supported latent states")
    if not base.invertible:
        notes.append("invertibility fails: histories do not separate the behavior-supported latent states")
    fields = {k: v for k, v in asdict(base).items() if k != "notes"}
    fields.update(nums)
    return ConditionReport(**fields, notes=notes)


def kappa_bound_holds(report: ConditionReport, tol: float = 1e-8) -> bool:
    """``kappa <= Dr * IV_1`` up to ``tol`` relative to the right side (trivially true when it is infinite)."""
    rhs = report.dr * report.iv1
    if rhs == math.inf:
        return True
    return bool(report.kappa <= rhs + tol * max(1.0, abs(rhs)))


# -- Bellman residuals ------------------------------------------------------------------

def learnable_value_function(model: TabularPOMDP, policy_e: MemoryPolicy, policy_b: MemoryPolicy,
                             config: WindowConfig, mats: ProbabilityMatrices | None = None) -> np.ndarray:
    """Coefficients ``b`` over one-hot ``F_bar`` with ``E[b(F_bar) | z, s] = V(z, s)`` on ``S_bar_b``.

    Minimum-norm solution; exact whenever ``Pr(F_bar | S_bar_b)`` has full column rank.
    """
    mats = mats or probability_matrices(model, policy_b, config)
    v = value_function(model, _window_policy(policy_e, config.m)).ravel()[mats.support]
    return pinv(mats.fbar_given_state.T) @ v


def bellman_residual(ds: OfflineDataset, q, policy_e: MemoryPolicy, policy_b: MemoryPolicy, gamma: float,
                     phi_h: FeatureMap | None = None) -> float:
    """``E[(proj of mu (R + gamma q(F_bar')) - q(F_bar) onto phi_H)^2]``.

    The projection is a ridgeless weighted regression. With one-hot history
    features (the default) it is the exact conditional expectation given ``H``,
    so a population dataset yields the population residual.
    """
    phi_h = phi_h or one_hot_history(ds.config, ds.n_obs, ds.n_actions)
    w = ds.tuple_weights()
    mu = ds.mu(policy_e, policy_b)
    resid = mu * (ds.rewards + gamma * np.asarray(q(ds.fbar_next()))) - np.asarray(q(ds.fbar()))
    if phi_h.kind == "one-hot":
        idx = phi_h.index(ds.history())
        num = np.bincount(idx, weights=w * resid, minlength=phi_h.dim)
        den = np.bincount(idx, weights=w, minlength=phi_h.dim)
        ok = den > 0
        return float(np.sum(num[ok] ** 2 / den[ok]))
    ph = phi_h.dense(ds.history())
    gram = ph.T @ (ph * w[:, None])
    beta = pinv(gram) @ (ph.T @ (w * resid))
    fitted = ph @ beta
    return float(max(w @ fitted ** 2, 0.0))
