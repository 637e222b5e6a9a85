"""Observation-sequence probabilities under an evaluation policy, from behavior data.

Memory-less policies only (``M = 0``), so ``F_bar = F``. With

    B   = E[phi_F(F) phi_H(H)']                              (d_F x d_H)
    D_t = E[1{O = o_t, A = a_t} mu phi_F(F') phi_H(H)']      (d_F x d_H)
    C   = E_nu[phi_F(F_0)],   h = E[phi_H(H)]

the joint probability of ``(o_0, a_0, ..., o_{T-1}, a_{T-1})`` is
``h' B^+ D_{T-1} B^+ ... D_0 B^+ C``. It is the closed form of the backward
recursion ``B' theta_T = h``, ``B' theta_t = D_t' theta_{t+1}``, value ``C' theta_0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import OfflineDataset, WindowConfig
from .errors import ConfigurationError, DegenerateEstimateError, InsufficientSupportError
from .estimators import EstimatorConfig, MomentSet, _weighted_cross, _weighted_mean, linear_weights
from .features import FeatureMap, one_hot_fbar, one_hot_history
from .linalg import numerical_rank, pinv
from .model import MemoryPolicy, TabularPOMDP
from .oracles import behavior_stationary_distribution
from .population import population_dataset


@dataclass(frozen=True)
class DynamicsMoments:
    b_mat: np.ndarray
    d_mats: dict
    c_vec: np.ndarray
    h_mean: np.ndarray
    o_h_mat: np.ndarray
    m3: np.ndarray | None = None
    conditional: bool = False
    source: str = "empirical"
    pair_probs: dict = field(default_factory=dict)

    def __post_init__(self):
        d_f, d_h = self.b_mat.shape
        if self.c_vec.shape != (d_f,) or self.h_mean.shape != (d_h,) or self.o_h_mat.shape[1] != d_h:
            raise ConfigurationError("dynamics moment dimensions are inconsistent")
        for key, d in self.d_mats.items():
            if d.shape != (d_f, d_h):
                raise ConfigurationError(f"D matrix for {key} has shape {d.shape}, expected {(d_f, d_h)}")

    @property
    def rank_b(self) -> int:
        return numerical_rank(self.b_mat)

    def d(self, o: int, a: int) -> np.ndarray:
        try:
            return self.d_mats[(int(o), int(a))]
        except KeyError:
            raise ConfigurationError(f"no D matrix estimated for the pair ({o}, {a})") from None


def _check_memoryless(*policies: MemoryPolicy) -> None:
    if any(p.memory != 0 for p in policies):
        raise ConfigurationError("dynamics learning needs memory-less policies")


def _check_config(config: WindowConfig) -> None:
    if config.m != 0:
        raise ConfigurationError("dynamics learning is restricted to M = 0")


def estimate_dynamics_moments(ds: OfflineDataset, policy_e: MemoryPolicy, policy_b: MemoryPolicy,
                              targets: Sequence | None = None, phi_f: FeatureMap | None = None,
                              phi_h: FeatureMap | None = None, conditional: bool = False) -> DynamicsMoments:
    """Weighted moments from an empirical or population dataset.

    ``targets`` lists the ``(o, a)`` pairs needing a ``D`` matrix (default:
    every pair). With ``conditional=True`` each ``D`` is the conditional
    expectation given ``(O, A) = (o, a)``, the up-to-scale variant that avoids
    estimating ``Pr(O = o, A = a)``.
    """
    _check_memoryless(policy_e, policy_b)
    _check_config(ds.config)
    if ds.n == 0:
        raise ConfigurationError("dynamics moments need at least one tuple")
    phi_f = phi_f or one_hot_fbar(ds.config, ds.n_obs, ds.n_actions)
    phi_h = phi_h or one_hot_history(ds.config, ds.n_obs, ds.n_actions)
    if targets is None:
        targets = [(o, a) for o in range(ds.n_obs) for a in range(ds.n_actions)]
    w = ds.tuple_weights()
    mu = ds.mu(policy_e, policy_b)
    ph = phi_h.transform(ds.history())
    pf = phi_f.transform(ds.fbar())
    pf_next = phi_f.transform(ds.fbar_next())
    b_mat = _weighted_cross(pf, w, ph)
    d_mats, pair_probs = {}, {}
    for o, a in dict.fromkeys((int(o), int(a)) for o, a in targets):
        hit = (ds.o == o) & (ds.a == a)
        prob = float(w[hit].sum())
        if prob <= 0:
            raise InsufficientSupportError(f"no data with (O, A) = ({o}, {a})")
        d = _weighted_cross(pf_next, w * mu * hit, ph)
        d_mats[(o, a)] = d / prob if conditional else d
        pair_probs[(o, a)] = prob
    c_vec = _weighted_mean(phi_f.transform(ds.init_fbar()), ds.initial_weights())
    h_mean = _weighted_mean(ph, w)
    o_onehot = np.zeros((ds.n, ds.n_obs))
    o_onehot[np.arange(ds.n), ds.o] = 1.0
    o_h_mat = _weighted_cross(o_onehot, w, ph)
    m3 = _weighted_cross(ph, w, ph)
    return DynamicsMoments(b_mat, d_mats, c_vec, h_mean, o_h_mat, m3, conditional,
                           "population" if ds.is_population else "empirical", pair_probs)


def population_dynamics_moments(model: TabularPOMDP, policy_e: MemoryPolicy, policy_b: MemoryPolicy,
                                config: WindowConfig, targets=None, init_table=None,
                                conditional: bool = False) -> DynamicsMoments:
    """Exact moments; the initial law of ``S_0`` is the model's unless ``init_table`` is given."""
    _check_config(config)
    ds = population_dataset(model, policy_b, config, init_table)
    return estimate_dynamics_moments(ds, policy_e, policy_b, targets, conditional=conditional)


def _operator_chain(moments: DynamicsMoments, sequence) -> np.ndarray:
    """``B^+ D_{T-1} B^+ ... D_0 B^+ C`` (a vector in R^{d_H})."""
    b_pinv = pinv(moments.b_mat)
    vec = b_pinv @ moments.c_vec
    for o, a in sequence:
        vec = b_pinv @ (moments.d(o, a) @ vec)
    return vec


def spectral_joint_probability(moments: DynamicsMoments, sequence) -> float:
    """Estimated ``Pr(o_0, a_0, ..., o_{T-1}, a_{T-1})`` under the evaluation policy.

    With conditional (up-to-scale) moments the result is off by the product
    of the ``Pr(O = o_t, A = a_t)`` factors.
    """
    return float(moments.h_mean @ _operator_chain(moments, sequence))


@dataclass(frozen=True)
class ConditionalEstimate:
    probs: np.ndarray
    raw: np.ndarray


def spectral_conditional_distribution(moments: DynamicsMoments, sequence, return_raw: bool = False):
    """Estimated ``Pr(O_T = . | o_0, a_0, ..., a_{T-1})``; negatives are clipped before normalizing."""
    raw = moments.o_h_mat @ _operator_chain(moments, sequence)
    clipped = np.clip(raw, 0.0, None)
    total = clipped.sum()
    if not total > 0:
        raise DegenerateEstimateError("conditional estimate has no positive mass")
    probs = clipped / total
    return ConditionalEstimate(probs, raw) if return_raw else probs


def minimax_dynamics(moments: DynamicsMoments, sequence, cfg: EstimatorConfig | None = None) -> float:
    """Backward minimax recursion with linear value and critic classes.

    Each step is the linear minimax solve with moments ``m1 = target`` (the
    history-weighted mean of the step's regression target), ``m2 = B'`` and
    ``m3 = E[phi_H phi_H']``; unregularized by default.
    """
    cfg = cfg or EstimatorConfig.exact()
    d_f, d_h = moments.b_mat.shape
    m3 = moments.m3 if moments.m3 is not None else np.eye(d_h)

    def solve(target):
        ms = MomentSet(target, moments.b_mat.T, m3, moments.c_vec, 0.0, moments.source, 0)
        return linear_weights(ms, cfg)

    theta = solve(moments.h_mean)
    for o, a in reversed(list(sequence)):
        theta = solve(moments.d(o, a).T @ theta)
    return float(moments.c_vec @ theta)


def minimax_dynamics_enumerate(ds: OfflineDataset, q_classes: Sequence[Sequence[Callable]],
                               xi_class: Sequence[Callable], lam: float, sequence,
                               policy_e: MemoryPolicy, policy_b: MemoryPolicy) -> float:
    """Backward recursion over finite classes; ``q_classes[t]`` is the class for step ``t`` (length T + 1)."""
    _check_memoryless(policy_e, policy_b)
    sequence = list(sequence)
    if len(q_classes) != len(sequence) + 1:
        raise ConfigurationError("need one value class per step plus the terminal one")
    if not xi_class or any(not qc for qc in q_classes):
        raise ConfigurationError("classes must be nonempty")
    w = ds.tuple_weights()
    mu = ds.mu(policy_e, policy_b)
    fb, fb_next = ds.fbar(), ds.fbar_next()
    crit = np.stack([np.asarray(xi(ds.history()), float) for xi in xi_class])
    penalty = lam * (crit ** 2 @ w)

    def fit(target, cls):
        resid = np.stack([target - np.asarray(q(fb), float) for q in cls])
        obj = (resid * w) @ crit.T - penalty[None, :]
        return cls[int(np.argmin(obj.max(axis=1)))]

    q = fit(np.ones(ds.n), q_classes[-1])
    for t in range(len(sequence) - 1, -1, -1):
        o, a = sequence[t]
        hit = (ds.o == o) & (ds.a == a)
        q = fit(hit * mu * np.asarray(q(fb_next), float), q_classes[t])
    return float(ds.initial_weights() @ np.asarray(q(ds.init_fbar()), float))


# -- action-free special case -------------------------------------------------------------

@dataclass(frozen=True)
class HMMMoments:
    """``p1 = Pr(O_-1)``, ``p21[i, j] = Pr(O_0 = i, O_-1 = j)``, ``p3[o][k, j] = Pr(O_0 = o, O_1 = k, O_-1 = j)``."""

    p1: np.ndarray
    p21: np.ndarray
    p3: np.ndarray

    @property
    def rank(self) -> int:
        return numerical_rank(self.p21)


def hmm_moments_population(model: TabularPOMDP) -> HMMMoments:
    """Exact stationary moments of an action-free model (``|A| = 1``)."""
    if model.n_actions != 1:
        raise ConfigurationError("HMM moments need a model with a single action")
    from .model import uniform_policy
    pi = behavior_stationary_distribution(model, uniform_policy(model.n_obs, 1), 0)[0]
    t = model.transition[:, 0, :]
    e = model.emission
    # joint[j, i, k] = Pr(O_-1 = j, O_0 = i, O_1 = k)
    joint = np.einsum("s,sj,st,ti,tu,uk->jik", pi, e, t, e, t, e)
    p1 = joint.sum(axis=(1, 2))
    p21 = joint.sum(axis=2).T
    p3 = joint.transpose(1, 2, 0)
    return HMMMoments(p1, p21, p3)


def hmm_moments_empirical(sequences) -> HMMMoments:
    """Moments from observation sequences (n, L) with L >= 3, using every sliding triple."""
    seq = np.asarray(sequences, dtype=np.int64)
    if seq.ndim != 2 or seq.shape[1] < 3:
        raise ConfigurationError("need an (n, L >= 3) array of observation sequences")
    n_obs = int(seq.max()) + 1
    trip = np.stack([seq[:, :-2].ravel(), seq[:, 1:-1].ravel(), seq[:, 2:].ravel()], axis=1)
    joint = np.zeros((n_obs,) * 3)
    np.add.at(joint, (trip[:, 0], trip[:, 1], trip[:, 2]), 1.0)
    joint /= len(trip)
    return HMMMoments(joint.sum(axis=(1, 2)), joint.sum(axis=2).T, joint.transpose(1, 2, 0))


def hmm_spectral(moments: HMMMoments, sequence) -> float:
    """``p1' p21^+ {prod_t p3[o_t] p21^+} p1`` with the product ordered ``t = T-1, ..., 0``."""
    p_inv = pinv(moments.p21)
    vec = p_inv @ moments.p1
    for o in sequence:
        vec = p_inv @ (moments.p3[int(o)] @ vec)
    return float(moments.p1 @ vec)
