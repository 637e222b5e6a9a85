"""Policy-value estimators built on learnable future-dependent value functions.

All estimators solve the conditional moment problem

    E[ mu(Z, O, A) (R + gamma q(F_bar')) - q(F_bar) | H ] = 0

over a value class ``Q`` with a critic class ``Xi`` and then average the
fitted ``q`` over the initial law of ``F_bar``. Regularized versions use

    min_q max_xi  E[(mu (R + gamma q') - q) xi] - lam/2 E[xi^2] - alpha/2 |xi|^2 + alpha'/2 |q|^2.

Expectations are weighted sums so population-mode datasets (exact weights)
and empirical datasets (uniform weights) share the same code.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse
from scipy.special import logsumexp

from .data import OfflineDataset, WindowConfig
from .errors import ConfigurationError, NumericalError
from .features import FeatureMap, KernelFn, fit_kernel
from .linalg import PINV_RTOL, pinv
from .model import MemoryPolicy, TabularPOMDP
from .population import initial_fbar_law, population_dataset


@dataclass(frozen=True)
class EstimatorConfig:
    lam: float = 1.0
    alpha: float = 0.0
    alpha_prime: float = 0.0
    gamma: float | None = None

    def __post_init__(self):
        for name in ("lam", "alpha", "alpha_prime"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigurationError(f"{name} must be a finite nonnegative number, got {v}")
        if self.gamma is not None and not 0 <= self.gamma < 1:
            raise ConfigurationError("gamma must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "alpha": self.alpha, "alpha_prime": self.alpha_prime, "gamma": self.gamma}

    @classmethod
    def exact(cls, gamma: float | None = None) -> "EstimatorConfig":
        """Unregularized setting used with population moments."""
        return cls(0.0, 0.0, 0.0, gamma)


@dataclass(frozen=True)
class MomentSet:
    """Linear-class moments; ``g`` and ``p_next`` split ``m2 = g - gamma p_next``."""

    m1: np.ndarray
    m2: np.ndarray
    m3: np.ndarray
    nu_mean: np.ndarray
    gamma: float
    source: str
    n: int
    g: np.ndarray | None = None
    p_next: np.ndarray | None = None

    def __post_init__(self):
        d_h, d_f = self.m2.shape
        if self.m1.shape != (d_h,) or self.m3.shape != (d_h, d_h) or self.nu_mean.shape != (d_f,):
            raise ConfigurationError("moment dimensions are inconsistent")

    @property
    def d_h(self) -> int:
        return self.m2.shape[0]

    @property
    def d_fbar(self) -> int:
        return self.m2.shape[1]


@dataclass(frozen=True)
class ValueEstimate:
    estimator: str
    j_hat: float
    coefficients: np.ndarray
    residual_norm: float
    config: dict
    n: int
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.j_hat) or not np.all(np.isfinite(self.coefficients)):
            raise NumericalError(f"{self.estimator}: non-finite estimate")

    def to_record(self, seed=None) -> dict:
        return {"estimator": self.estimator, "j_hat": float(self.j_hat), "n": int(self.n), "config": self.config,
                "residual_norm": float(self.residual_norm), "seed": seed}


# -- moments ------------------------------------------------------------------------

def _weighted_cross(a, weights, b) -> np.ndarray:
    """``a' diag(weights) b`` for dense or sparse feature matrices."""
    left = a.multiply(weights[:, None]) if scipy.sparse.issparse(a) else a * weights[:, None]
    out = left.T @ b
    return out.toarray() if scipy.sparse.issparse(out) else np.asarray(out)


def _weighted_mean(phi, weights) -> np.ndarray:
    out = phi.T @ weights
    return np.asarray(out).ravel()


def compute_moments(ds: OfflineDataset, phi_fbar: FeatureMap, phi_h: FeatureMap, policy_e: MemoryPolicy,
                    policy_b: MemoryPolicy, gamma: float, nu_mean=None) -> MomentSet:
    """Weighted moments of a (population or empirical) dataset."""
    if ds.n == 0:
        raise ConfigurationError("moment computation needs at least one tuple")
    if phi_fbar.domain != "fbar" or phi_h.domain != "history":
        raise ConfigurationError("feature maps must be over fbar and history domains")
    w = ds.tuple_weights()
    mu = ds.mu(policy_e, policy_b)
    ph = phi_h.transform(ds.history())
    pf = phi_fbar.transform(ds.fbar())
    pf_next = phi_fbar.transform(ds.fbar_next())
    m1 = _weighted_mean(ph, w * mu * ds.rewards)
    g = _weighted_cross(ph, w, pf)
    p_next = _weighted_cross(ph, w * mu, pf_next)
    m3 = _weighted_cross(ph, w, ph)
    if nu_mean is None:
        if ds.n_init == 0:
            raise ConfigurationError("dataset has no initial samples; pass nu_mean")
        nu_mean = _weighted_mean(phi_fbar.transform(ds.init_fbar()), ds.initial_weights())
    source = "population" if ds.is_population else "empirical"
    return MomentSet(m1, g - gamma * p_next, 0.5 * (m3 + m3.T), np.asarray(nu_mean, float), gamma, source, ds.n,
                     g, p_next)


def compute_moments_empirical(ds: OfflineDataset, phi_fbar: FeatureMap, phi_h: FeatureMap,
                              policy_e: MemoryPolicy, policy_b: MemoryPolicy, gamma: float,
                              nu_mean=None) -> MomentSet:
    """Sample averages over ``D_tra``; ``nu_mean`` from ``D_ini`` unless given (e.g. an exact initial law)."""
    return compute_moments(ds, phi_fbar, phi_h, policy_e, policy_b, gamma, nu_mean)


def compute_moments_population(model: TabularPOMDP, policy_b: MemoryPolicy, policy_e: MemoryPolicy,
                               phi_fbar: FeatureMap, phi_h: FeatureMap, config: WindowConfig,
                               init_table=None) -> MomentSet:
    """Exact moments under the behavior-stationary law by full enumeration."""
    ds = population_dataset(model, policy_b, config, init_table)
    return compute_moments(ds, phi_fbar, phi_h, policy_e, policy_b, model.gamma)


def exact_nu_mean(model: TabularPOMDP, policy_b: MemoryPolicy, config: WindowConfig, phi_fbar: FeatureMap,
                  init_table=None) -> np.ndarray:
    """``E[phi(F_bar_0)]`` under the exact initial law (the known-initial-distribution variant)."""
    from .data import FbarBatch
    z_obs, z_act, f_obs, f_act, prob = initial_fbar_law(model, policy_b, config, init_table)
    return _weighted_mean(phi_fbar.transform(FbarBatch(z_obs, z_act, f_obs, f_act)), prob)


# -- linear closed form ---------------------------------------------------------------

def _critic_root(moments: MomentSet, cfg: EstimatorConfig):
    """``L`` with ``L' L = pinv(alpha I + lam M3)``, or None for the just-identified case."""
    if cfg.lam == 0 and cfg.alpha == 0:
        return None
    a = cfg.alpha * np.eye(moments.d_h) + cfg.lam * moments.m3
    evals, evecs = np.linalg.eigh(0.5 * (a + a.T))
    if evals[-1] <= 0:
        raise NumericalError("critic matrix alpha I + lam M3 is zero")
    keep = evals > PINV_RTOL * evals[-1]
    return (evecs[:, keep] / np.sqrt(evals[keep])).T


def linear_weights(moments: MomentSet, cfg: EstimatorConfig) -> np.ndarray:
    """Coefficient vector ``w`` of the fitted ``q = w' phi_fbar``."""
    root = _critic_root(moments, cfg)
    if root is None:
        lhs, rhs = moments.m2, moments.m1
    else:
        lhs, rhs = root @ moments.m2, root @ moments.m1
    if cfg.alpha_prime > 0:
        d = moments.d_fbar
        lhs = np.vstack([lhs, math.sqrt(cfg.alpha_prime) * np.eye(d)])
        rhs = np.concatenate([rhs, np.zeros(d)])
    return pinv(lhs) @ rhs


def projected_residual(moments: MomentSet, w: np.ndarray) -> float:
    """``E[(proj of the Bellman residual on phi_H)^2] = Z' M3^+ Z`` with ``Z = M1 - M2 w``."""
    z = moments.m1 - moments.m2 @ w
    return float(max(z @ pinv(moments.m3) @ z, 0.0))


def minimax_linear(moments: MomentSet, cfg: EstimatorConfig | None = None) -> ValueEstimate:
    """Closed-form minimax estimate over linear ``Q`` and ``Xi``.

    ``lam = alpha = alpha' = 0`` gives ``w = M2^+ M1``; otherwise
    ``w = (M2' A^+ M2 + alpha' I)^+ M2' A^+ M1`` with ``A = alpha I + lam M3``.
    """
    cfg = cfg or EstimatorConfig()
    w = linear_weights(moments, cfg)
    if not np.all(np.isfinite(w)):
        s = np.linalg.svd(moments.m2, compute_uv=False)
        raise NumericalError(f"non-finite weights; M2 singular values span [{s[-1]:.3e}, {s[0]:.3e}]")
    j_hat = float(moments.nu_mean @ w)
    return ValueEstimate("minimax_linear", j_hat, w, projected_residual(moments, w), cfg.to_dict(), moments.n,
                         {"source": moments.source})


def finite_horizon_linear(moments: MomentSet, horizon: int) -> ValueEstimate:
    """Backward recursion ``theta_t = G^+ (M1 + gamma P' theta_{t+1})`` from ``theta_T = 0``."""
    if horizon < 1:
        raise ConfigurationError("horizon T must be >= 1")
    if moments.g is None or moments.p_next is None:
        raise ConfigurationError("finite-horizon recursion needs the g and p_next moments")
    g_pinv = pinv(moments.g)
    theta = np.zeros(moments.d_fbar)
    thetas = [theta]
    for _ in range(horizon):
        theta = g_pinv @ (moments.m1 + moments.gamma * (moments.p_next @ theta))
        thetas.append(theta)
    j_hat = float(moments.nu_mean @ theta)
    return ValueEstimate("finite_horizon_linear", j_hat, theta, projected_residual(moments, theta),
                         {"horizon": horizon, "gamma": moments.gamma}, moments.n,
                         {"thetas": thetas[::-1]})


# -- RKHS -------------------------------------------------------------------------------

@dataclass(frozen=True)
class RKHSValueFunction:
    """``q(x) = sum_i c_i [k(x, F_bar_i) - gamma mu_i k(x, F_bar'_i)]``."""

    kernel: KernelFn
    coef: np.ndarray
    centers: object
    centers_next: object
    mu: np.ndarray
    gamma: float

    def __call__(self, batch) -> np.ndarray:
        k1 = self.kernel.matrix(batch, self.centers)
        k2 = self.kernel.matrix(batch, self.centers_next)
        return k1 @ self.coef - self.gamma * (k2 @ (self.mu * self.coef))


def _psd_factor(a: np.ndarray):
    evals, evecs = np.linalg.eigh(a)
    top = evals[-1] if evals.size else 0.0
    keep = evals > PINV_RTOL * top if top > 0 else np.zeros(evals.shape, bool)
    return evecs[:, keep], np.sqrt(evals[keep])


def _rkhs_dual(g, w_mat, y, alpha_prime):
    """Dual weights minimizing ``(Y - G c)' W (Y - G c) + alpha' c' G c``.

    Among multiple minimizers the one of least RKHS norm ``c' G c`` is taken
    (the ``alpha' -> 0`` limit), parametrizing ``c = U s^{-1/2} v`` on the range of ``G``.
    """
    ug, sg = _psd_factor(g)
    uw, sw = _psd_factor(w_mat)
    root = (uw * sw).T
    lhs = root @ (ug * sg)
    rhs = root @ y
    if alpha_prime > 0:
        lhs = np.vstack([lhs, math.sqrt(alpha_prime) * np.eye(lhs.shape[1])])
        rhs = np.concatenate([rhs, np.zeros(lhs.shape[1])])
    v = pinv(lhs) @ rhs
    return ug @ (v / sg)


def minimax_rkhs(ds: OfflineDataset, k_fbar: KernelFn, k_h: KernelFn, cfg: EstimatorConfig,
                 policy_e: MemoryPolicy, policy_b: MemoryPolicy, gamma: float) -> ValueEstimate:
    """Representer-theorem solution of the regularized minimax problem over two RKHSs.

    With ``D = diag(weights)``, ``psi_i = k(., F_bar_i) - gamma mu_i k(., F_bar'_i)``
    and ``G_ij = <psi_i, psi_j>``, the critic is maximized in closed form giving
    ``W = D K_H (lam K_H D K_H + alpha K_H)^+ K_H D``; the dual weights solve
    ``(W G + alpha' I) c = W Y`` with ``Y_i = mu_i R_i``.
    """
    if cfg.lam == 0 and cfg.alpha == 0:
        raise ConfigurationError("the RKHS critic needs lam > 0 or alpha > 0")
    if ds.n == 0:
        raise ConfigurationError("minimax_rkhs needs at least one tuple")
    fb, fb_next, hist = ds.fbar(), ds.fbar_next(), ds.history()
    k_fbar = fit_kernel(k_fbar, fb)
    k_h = fit_kernel(k_h, hist)
    mu = ds.mu(policy_e, policy_b)
    d = ds.tuple_weights()
    y = mu * ds.rewards
    k_ff = k_fbar.matrix(fb, fb)
    k_fn = k_fbar.matrix(fb, fb_next)
    k_nn = k_fbar.matrix(fb_next, fb_next)
    gm = gamma * mu
    g = k_ff - k_fn * gm[None, :] - (k_fn * gm[None, :]).T + gm[:, None] * k_nn * gm[None, :]
    g = 0.5 * (g + g.T)
    kh = k_h.matrix(hist, hist)
    kh = 0.5 * (kh + kh.T)
    dk = d[:, None] * kh
    inner = cfg.lam * (kh @ dk) + cfg.alpha * kh
    w_mat = dk.T @ pinv(0.5 * (inner + inner.T)) @ dk
    coef = _rkhs_dual(g, 0.5 * (w_mat + w_mat.T), y, cfg.alpha_prime)
    if not np.all(np.isfinite(coef)):
        raise NumericalError("RKHS dual solve produced non-finite weights")
    q = RKHSValueFunction(k_fbar, coef, fb, fb_next, mu, gamma)
    init_vals = q(ds.init_fbar()) if ds.n_init else np.zeros(0)
    j_hat = float(ds.initial_weights() @ init_vals)
    resid = y - g @ coef
    return ValueEstimate("minimax_rkhs", j_hat, coef, float(resid @ w_mat @ resid), cfg.to_dict(), ds.n,
                         {"value_function": q, "bandwidths": (k_fbar.params.get("bandwidth"), k_h.params.get("bandwidth"))})


# -- finite classes ---------------------------------------------------------------------

def linear_function(w, feature_map: FeatureMap) -> Callable:
    """``x -> w' phi(x)`` as a batch function."""
    w = np.asarray(w, dtype=float)
    return lambda batch: np.asarray(feature_map.transform(batch) @ w).ravel()


def grid_linear_class(feature_map: FeatureMap, grid) -> tuple[list[Callable], np.ndarray]:
    """All linear functions whose coefficients range over ``grid`` in every coordinate."""
    grid = np.asarray(grid, dtype=float)
    coefs = np.stack(np.meshgrid(*([grid] * feature_map.dim), indexing="ij"), axis=-1).reshape(-1, feature_map.dim)
    return [linear_function(c, feature_map) for c in coefs], coefs


def enumerate_objective(ds: OfflineDataset, q_class: Sequence[Callable], xi_class: Sequence[Callable], lam: float,
                        policy_e: MemoryPolicy, policy_b: MemoryPolicy, gamma: float) -> np.ndarray:
    """Matrix ``L[q, xi] = E[(mu (R + gamma q(F_bar')) - q(F_bar)) xi(H) - lam xi(H)^2]``."""
    w = ds.tuple_weights()
    mu = ds.mu(policy_e, policy_b)
    fb, fb_next, hist = ds.fbar(), ds.fbar_next(), ds.history()
    resid = np.stack([mu * (ds.rewards + gamma * np.asarray(q(fb_next))) - np.asarray(q(fb)) for q in q_class])
    crit = np.stack([np.asarray(xi(hist), dtype=float) for xi in xi_class])
    return (resid * w) @ crit.T - lam * (crit ** 2 @ w)[None, :]


def minimax_enumerate(ds: OfflineDataset, q_class: Sequence[Callable], xi_class: Sequence[Callable],
                      cfg: EstimatorConfig, policy_e: MemoryPolicy, policy_b: MemoryPolicy, gamma: float,
                      q_bound: float | None = None, xi_bound: float | None = None) -> ValueEstimate:
    """Exact ``argmin_q max_xi`` over finite classes; ties go to the first index.

    ``q_bound`` / ``xi_bound`` drop candidates whose sup-norm on the data
    exceeds the bound.
    """
    if not q_class or not xi_class:
        raise ConfigurationError("value and critic classes must be nonempty")
    if len(q_class) * len(xi_class) > 10 ** 7:
        raise ConfigurationError("class product too large for enumeration")
    q_idx = np.arange(len(q_class))
    xi_idx = np.arange(len(xi_class))
    if q_bound is not None:
        fb = ds.fbar()
        q_idx = np.array([i for i in q_idx if np.max(np.abs(q_class[i](fb)), initial=0.0) <= q_bound])
    if xi_bound is not None:
        hist = ds.history()
        xi_idx = np.array([i for i in xi_idx if np.max(np.abs(xi_class[i](hist)), initial=0.0) <= xi_bound])
    if not len(q_idx) or not len(xi_idx):
        raise ConfigurationError("no candidate satisfies the box constraints")
    obj = enumerate_objective(ds, [q_class[i] for i in q_idx], [xi_class[i] for i in xi_idx], cfg.lam,
                              policy_e, policy_b, gamma)
    inner = obj.max(axis=1)
    best = int(np.argmin(inner))
    q = q_class[q_idx[best]]
    j_hat = float(ds.initial_weights() @ np.asarray(q(ds.init_fbar()))) if ds.n_init else 0.0
    return ValueEstimate("minimax_enumerate", j_hat, np.array([float(q_idx[best])]), float(inner[best]),
                         cfg.to_dict(), ds.n, {"index": int(q_idx[best]), "objective": float(inner[best])})


def linear_inner_max(moments: MomentSet, w: np.ndarray, lam: float) -> float:
    """``max_theta theta'(M1 - M2 w) - lam theta' M3 theta`` over all of R^{d_H} (inf if unbounded)."""
    z = moments.m1 - moments.m2 @ w
    if lam == 0:
        return 0.0 if np.allclose(z, 0.0, atol=1e-14) else float("inf")
    m3p = pinv(moments.m3)
    leak = z - moments.m3 @ (m3p @ z)
    if np.linalg.norm(leak) > 1e-10 * max(1.0, np.linalg.norm(z)):
        return float("inf")
    return float(z @ m3p @ z) / (4.0 * lam)


# -- sequential importance sampling -----------------------------------------------------

@dataclass(frozen=True)
class SISResult:
    j_hat: float
    stderr: float
    weight_variance: float
    log_weight_variance: float
    n: int
    horizon: int


def _trajectory_codes(traj, width: int, n_obs: int, n_actions: int) -> np.ndarray:
    """Window code (width ``width``) seen before each step."""
    if traj.prefix_obs.shape[1] < width:
        raise ConfigurationError(f"trajectories carry {traj.prefix_obs.shape[1]} prefix pairs, need {width}")
    k = n_obs * n_actions
    obs = np.concatenate([traj.prefix_obs, traj.obs], axis=1)
    acts = np.concatenate([traj.prefix_acts, traj.acts], axis=1)
    off = traj.prefix_obs.shape[1]
    pairs = obs * n_actions + acts
    codes = np.zeros(traj.obs.shape, dtype=np.int64)
    for j in range(width):
        codes = codes * k + pairs[:, off - width + j: off - width + j + traj.obs.shape[1]]
    return codes


def sis_estimate(trajectories, policy_e: MemoryPolicy, policy_b: MemoryPolicy, gamma: float,
                 horizon_cap: int | None = None) -> SISResult:
    """Per-decision importance-weighted return, truncated at ``horizon_cap`` steps.

    Weight statistics refer to the cumulative ratio at the last step; the
    log-variance is computed in the log domain so it stays finite when the
    weights overflow.
    """
    from .data import importance_ratio
    length = trajectories.obs.shape[1]
    cap = length if horizon_cap is None else min(int(horizon_cap), length)
    if cap < 1:
        raise ConfigurationError("horizon_cap must be >= 1")
    width = max(policy_e.memory, policy_b.memory)
    codes = _trajectory_codes(trajectories, width, policy_b.n_obs, policy_b.n_actions)[:, :cap]
    mu = importance_ratio(policy_e, policy_b, codes, trajectories.obs[:, :cap], trajectories.acts[:, :cap])
    with np.errstate(divide="ignore"):
        log_mu = np.log(mu)
    log_rho = np.cumsum(log_mu, axis=1)
    rho = np.exp(log_rho)
    disc = gamma ** np.arange(cap)
    returns = (rho * trajectories.rewards[:, :cap]) @ disc
    n = len(returns)
    last = log_rho[:, -1]
    log_m2 = logsumexp(2 * last) - math.log(n)
    log_m1sq = 2 * (logsumexp(last) - math.log(n))
    if not np.isfinite(log_m2):
        log_var = -math.inf
    else:
        gap = min(log_m1sq - log_m2, 0.0)
        log_var = log_m2 + math.log1p(-math.exp(gap)) if gap < 0 else -math.inf
    stderr = float(returns.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return SISResult(float(returns.mean()), stderr, float(math.exp(log_var)) if log_var < 700 else float("inf"),
                     float(log_var), n, cap)
