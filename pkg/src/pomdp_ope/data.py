"""Offline datasets of history-observation-action-reward-future tuples.

A dataset is stored column-wise. For tuple ``i`` at trajectory time ``t``:

* ``h_obs[i], h_act[i]``: the ``M_H`` pairs before time ``t`` (oldest first);
* ``fut_obs[i]``: ``O_t .. O_{t+M_F}``; ``fut_act[i]``: ``A_t .. A_{t+M_F-1}``;
* ``rewards[i]``: ``R_t``.

``F = (fut_obs[:, :M_F], fut_act[:, :M_F-1])`` and ``F' = (fut_obs[:, 1:],
fut_act[:, 1:M_F])``; ``Z`` is the last ``M`` pairs of ``H`` and ``Z'`` the
last ``M`` pairs of ``H`` extended by ``(O_t, A_t)``.

Initial samples (``D_ini``) store ``(Z_0, F_0)`` only: the action
``A_{M_F-1}`` is never used by a value function of ``F``.

Population-mode datasets carry ``weights`` (exact probabilities); ``rewards``
then holds ``E[R | observables]``. Empirical datasets have ``weights=None``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DatasetFormatError, OverlapError
from .model import LQGModel, MemoryPolicy, TabularPOMDP, decode_window, encode_window
from .oracles import behavior_stationary_distribution, window_chain
from .simulate import _initial_tabular, categorical, simulate_lqg, simulate_tabular

FORMAT_NAME = "pomdp-ope-dataset"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class WindowConfig:
    """Memory ``m`` (M), history length ``m_h`` (M_H > M) and future length ``m_f`` (M_F >= 1)."""

    m: int = 0
    m_h: int = 1
    m_f: int = 1

    def __post_init__(self):
        if self.m < 0:
            raise ConfigurationError("M must be >= 0")
        if self.m_h <= self.m:
            raise ConfigurationError(f"M_H={self.m_h} must exceed M={self.m}")
        if self.m_f < 1:
            raise ConfigurationError("M_F must be >= 1")

    def to_dict(self) -> dict:
        return {"m": self.m, "m_h": self.m_h, "m_f": self.m_f}

    @classmethod
    def from_dict(cls, d: dict) -> "WindowConfig":
        return cls(int(d["m"]), int(d["m_h"]), int(d["m_f"]))


@dataclass(frozen=True)
class TransitionTuple:
    """Row view of one tuple; pair sequences are tuples of ``(o, a)``."""

    h: tuple
    z: tuple
    o: int
    a: int
    r: float
    f: tuple
    z_next: tuple
    f_next: tuple


@dataclass(frozen=True)
class FbarBatch:
    """Column batch of ``F_bar = (Z, F)``."""

    z_obs: np.ndarray
    z_act: np.ndarray
    f_obs: np.ndarray
    f_act: np.ndarray

    def __len__(self) -> int:
        return self.f_obs.shape[0]


@dataclass(frozen=True)
class HistoryBatch:
    """Column batch of ``H``; ``o`` is the current observation (used by MDP-style instruments)."""

    h_obs: np.ndarray
    h_act: np.ndarray
    o: np.ndarray

    def __len__(self) -> int:
        return self.h_obs.shape[0]


def _arr(x, dtype=None):
    return np.asarray(x, dtype=dtype)


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    config: WindowConfig
    n_obs: int
    n_actions: int
    h_obs: np.ndarray
    h_act: np.ndarray
    fut_obs: np.ndarray
    fut_act: np.ndarray
    rewards: np.ndarray
    init_z_obs: np.ndarray
    init_z_act: np.ndarray
    init_f_obs: np.ndarray
    init_f_act: np.ndarray
    weights: np.ndarray | None = None
    init_weights: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        c = self.config
        n, n0 = len(self.rewards), len(self.init_f_obs)
        checks = [
            (self.h_obs, n, c.m_h), (self.h_act, n, c.m_h), (self.fut_obs, n, c.m_f + 1),
            (self.fut_act, n, c.m_f), (self.init_z_obs, n0, c.m), (self.init_z_act, n0, c.m),
            (self.init_f_obs, n0, c.m_f), (self.init_f_act, n0, c.m_f - 1),
        ]
        for arr, rows, width in checks:
            if arr.shape[:2] != (rows, width):
                raise DatasetFormatError(f"column of shape {arr.shape} inconsistent with window config {c}")
        if self.weights is not None and len(self.weights) != n:
            raise DatasetFormatError("weights length differs from tuple count")
        if self.init_weights is not None and len(self.init_weights) != n0:
            raise DatasetFormatError("init_weights length differs from initial-sample count")

    # -- sizes ------------------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.rewards)

    @property
    def n_init(self) -> int:
        return len(self.init_f_obs)

    @property
    def is_population(self) -> bool:
        return self.weights is not None

    def tuple_weights(self) -> np.ndarray:
        """Probability weights summing to one."""
        if self.weights is not None:
            return self.weights / self.weights.sum()
        return np.full(self.n, 1.0 / self.n) if self.n else np.zeros(0)

    def initial_weights(self) -> np.ndarray:
        if self.init_weights is not None:
            return self.init_weights / self.init_weights.sum()
        return np.full(self.n_init, 1.0 / self.n_init) if self.n_init else np.zeros(0)

    # -- derived columns --------------------------------------------------
    @property
    def o(self) -> np.ndarray:
        return self.fut_obs[:, 0]

    @property
    def a(self) -> np.ndarray:
        return self.fut_act[:, 0]

    def z_pairs(self):
        m = self.config.m
        return self.h_obs[:, self.config.m_h - m:], self.h_act[:, self.config.m_h - m:]

    def z_next_pairs(self):
        m = self.config.m
        obs = np.concatenate([self.h_obs, self.o[:, None]], axis=1)
        act = np.concatenate([self.h_act, self.a[:, None]], axis=1)
        return obs[:, obs.shape[1] - m:], act[:, act.shape[1] - m:]

    def z_codes(self) -> np.ndarray:
        return encode_window(*self.z_pairs(), self.n_obs, self.n_actions)

    def fbar(self) -> FbarBatch:
        mf = self.config.m_f
        return FbarBatch(*self.z_pairs(), self.fut_obs[:, :mf], self.fut_act[:, :mf - 1])

    def fbar_next(self) -> FbarBatch:
        mf = self.config.m_f
        return FbarBatch(*self.z_next_pairs(), self.fut_obs[:, 1:], self.fut_act[:, 1:mf])

    def init_fbar(self) -> FbarBatch:
        return FbarBatch(self.init_z_obs, self.init_z_act, self.init_f_obs, self.init_f_act)

    def history(self) -> HistoryBatch:
        return HistoryBatch(self.h_obs, self.h_act, self.o)

    def mu(self, policy_e: MemoryPolicy, policy_b: MemoryPolicy) -> np.ndarray:
        """Importance ratio of every tuple."""
        if self.n_obs == 0:
            raise OverlapError("density ratios of continuous-action policies are not supported")
        return importance_ratio(policy_e, policy_b, self.z_codes(), self.o, self.a)

    def tuple(self, i: int) -> TransitionTuple:
        def pairs(obs, act):
            return tuple(zip(np.asarray(obs).tolist(), np.asarray(act).tolist()))

        fb, fn = self.fbar(), self.fbar_next()
        mf = self.config.m_f

        def fpart(fo, fa):
            return tuple(np.asarray(fo).tolist()) + tuple(np.asarray(fa).tolist()) if mf else ()

        return TransitionTuple(
            h=pairs(self.h_obs[i], self.h_act[i]),
            z=pairs(fb.z_obs[i], fb.z_act[i]),
            o=_scalar(self.o[i]), a=_scalar(self.a[i]), r=float(self.rewards[i]),
            f=fpart(fb.f_obs[i], fb.f_act[i]),
            z_next=pairs(fn.z_obs[i], fn.z_act[i]),
            f_next=fpart(fn.f_obs[i], fn.f_act[i]),
        )

    @property
    def tuples(self) -> list[TransitionTuple]:
        return [self.tuple(i) for i in range(self.n)]

    def subset(self, idx) -> "OfflineDataset":
        idx = np.asarray(idx)
        return OfflineDataset(
            self.config, self.n_obs, self.n_actions, self.h_obs[idx], self.h_act[idx], self.fut_obs[idx],
            self.fut_act[idx], self.rewards[idx], self.init_z_obs, self.init_z_act, self.init_f_obs,
            self.init_f_act, None if self.weights is None else self.weights[idx], self.init_weights,
            dict(self.provenance))

    def replace(self, **changes) -> "OfflineDataset":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return OfflineDataset(**fields)


def _scalar(x):
    x = np.asarray(x)
    return x.item() if x.ndim == 0 else x.tolist()


# -- importance ratio ------------------------------------------------------------

def importance_ratio(policy_e: MemoryPolicy, policy_b: MemoryPolicy, z, o, a) -> np.ndarray:
    """``pi_e(a | z, o) / pi_b(a | z, o)`` with ``0/0 = 0``.

    ``z`` is a window code of the last ``max(M_e, M_b)`` pairs (each policy
    reads its own suffix). Raises :class:`OverlapError` when the evaluation
    policy acts where the behavior policy never does.
    """
    if policy_e.kind == "linear-gain" or policy_b.kind == "linear-gain":
        raise OverlapError("density ratios of continuous-action policies are not supported")
    z = np.asarray(z, dtype=np.int64)
    o = np.asarray(o, dtype=np.int64)
    a = np.asarray(a, dtype=np.int64)
    k = policy_b.n_obs * policy_b.n_actions
    pe = policy_e.table[z % (k ** policy_e.memory), o, a]
    pb = policy_b.table[z % (k ** policy_b.memory), o, a]
    bad = (pe > 0) & (pb <= 0)
    if np.any(bad):
        i = int(np.flatnonzero(np.atleast_1d(bad))[0])
        raise OverlapError(
            f"evaluation policy takes action {np.atleast_1d(a)[i]} at observation {np.atleast_1d(o)[i]} "
            "where the behavior policy has zero probability")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(pb > 0, pe / np.where(pb > 0, pb, 1.0), 0.0)


# -- generation -------------------------------------------------------------------

def _rollout(model: TabularPOMDP, policy: MemoryPolicy, codes, width, states, n_obs_steps, rng):
    """Continue from window ``codes`` (width ``width``) and latent ``states``.

    Returns observations (n, n_obs_steps), actions (n, n_obs_steps - 1) and
    the first reward.
    """
    k, n_a, m = model.n_pairs, model.n_actions, policy.memory
    n = len(states)
    obs = np.empty((n, n_obs_steps), dtype=np.int64)
    acts = np.empty((n, n_obs_steps - 1), dtype=np.int64)
    first_reward = np.zeros(n)
    codes = np.asarray(codes, dtype=np.int64).copy()
    for j in range(n_obs_steps):
        obs[:, j] = categorical(rng, model.emission[states])
        if j == n_obs_steps - 1:
            break
        z = codes % (k ** m)
        acts[:, j] = categorical(rng, policy.table[z, obs[:, j]])
        if j == 0:
            first_reward = model.reward[states, acts[:, 0]]
        states = categorical(rng, model.transition[states, acts[:, j]])
        if width:
            codes = (codes * k + obs[:, j] * n_a + acts[:, j]) % (k ** width)
    return obs, acts, first_reward


def _initial_samples(model, policy_b, n_init, config, rng, init_table):
    m = config.m
    policy = policy_b.with_memory(m) if policy_b.memory < m else policy_b
    if policy.memory > m:
        raise ConfigurationError("behavior policy memory exceeds window memory M")
    z, s = _initial_tabular(model, policy, n_init, rng, None, init_table)
    f_obs, f_act, _ = _rollout(model, policy, z, m, s, config.m_f, rng)
    z_obs, z_act = decode_window(z, m, model.n_obs, model.n_actions)
    return z_obs, z_act, f_obs, f_act


def burn_in_length(model: TabularPOMDP, policy_b: MemoryPolicy, width: int, tv_tol: float = 1e-6,
                   max_steps: int = 100_000) -> int:
    """Steps needed from the padded start until ``(window, s)`` is within ``tv_tol`` of stationarity."""
    chain = window_chain(model, policy_b, width)
    target = behavior_stationary_distribution(model, policy_b, width).ravel()
    dist = np.zeros(chain.size)
    dist[: model.n_states] = model.initial_state_dist
    pt = chain.matrix.T.tocsr()
    for step in range(max_steps):
        if 0.5 * np.abs(dist - target).sum() <= tv_tol:
            return step
        dist = pt @ dist
    raise ConfigurationError(f"chain not within TV {tv_tol} of stationarity after {max_steps} steps")


def generate_offline_dataset(model, policy_b: MemoryPolicy, n: int, n_init: int, config: WindowConfig,
                             mode: str = "iid-per-tuple", seed: int = 0, init_table=None) -> OfflineDataset:
    """Sample ``D_tra`` (``n`` tuples) and ``D_ini`` (``n_init`` samples) under ``policy_b``.

    ``iid-per-tuple`` draws each tuple's ``(H, S)`` from the exact
    behavior-stationary law (independent tuples). ``sliced-trajectory``
    slides a window over one long trajectory started after a burn-in that
    brings ``(H, S)`` within total variation 1e-6 of stationarity.
    """
    if n < 0 or n_init < 0:
        raise ConfigurationError("n and n_init must be >= 0")
    if mode not in ("iid-per-tuple", "sliced-trajectory"):
        raise ConfigurationError(f"unknown generation mode {mode!r}")
    if isinstance(model, LQGModel):
        return _generate_lqg(model, policy_b, n, n_init, config, mode, seed)
    policy_b.check_compatible(model)
    if policy_b.memory > config.m:
        raise ConfigurationError(f"behavior policy memory {policy_b.memory} exceeds window memory M={config.m}")
    rng = np.random.default_rng(seed)
    c = config
    provenance = {"seed": seed, "mode": mode, "generator": "tabular",
                  "initial": "explicit-table" if init_table is not None else "burn-in"}
    if n == 0:
        h_obs = h_act = np.zeros((0, c.m_h), dtype=np.int64)
        fut_obs, fut_act, rewards = np.zeros((0, c.m_f + 1), np.int64), np.zeros((0, c.m_f), np.int64), np.zeros(0)
    elif mode == "iid-per-tuple":
        stat = behavior_stationary_distribution(model, policy_b, c.m_h).ravel()
        flat = rng.choice(stat.size, size=n, p=stat)
        codes, states = flat // model.n_states, flat % model.n_states
        h_obs, h_act = decode_window(codes, c.m_h, model.n_obs, model.n_actions)
        fut_obs, fut_act, rewards = _rollout(model, policy_b, codes, c.m_h, states, c.m_f + 1, rng)
    else:
        burn = burn_in_length(model, policy_b, c.m_h)
        provenance["burn_in"] = burn
        length = burn + c.m_h + n + c.m_f
        traj = simulate_tabular(model, policy_b, 1, length, rng, burn_in=0)
        o_all, a_all, r_all = traj.obs[0], traj.acts[0], traj.rewards[0]
        starts = burn + c.m_h + np.arange(n)
        h_obs = np.stack([o_all[starts - c.m_h + j] for j in range(c.m_h)], axis=1)
        h_act = np.stack([a_all[starts - c.m_h + j] for j in range(c.m_h)], axis=1)
        fut_obs = np.stack([o_all[starts + j] for j in range(c.m_f + 1)], axis=1)
        fut_act = np.stack([a_all[starts + j] for j in range(c.m_f)], axis=1)
        rewards = r_all[starts]
    z_obs, z_act, f_obs, f_act = _initial_samples(model, policy_b, n_init, c, rng, init_table)
    return OfflineDataset(c, model.n_obs, model.n_actions, h_obs, h_act, fut_obs, fut_act, np.asarray(rewards, float),
                          z_obs, z_act, f_obs, f_act, provenance=provenance)


def _generate_lqg(model, policy_b, n, n_init, config, mode, seed):
    rng = np.random.default_rng(seed)
    c = config
    burn = 10 * (c.m_h + c.m_f)
    span = c.m_h + c.m_f + 1
    if mode == "iid-per-tuple":
        traj = simulate_lqg(model, policy_b, n, span, rng, burn_in=burn)
        obs, acts, rew = traj.obs, traj.acts, traj.rewards
        t = c.m_h
        h_obs, h_act = obs[:, :t], acts[:, :t]
        fut_obs, fut_act, rewards = obs[:, t:t + c.m_f + 1], acts[:, t:t + c.m_f], rew[:, t]
    else:
        traj = simulate_lqg(model, policy_b, 1, n + span, rng, burn_in=burn)
        o_all, a_all, r_all = traj.obs[0], traj.acts[0], traj.rewards[0]
        starts = c.m_h + np.arange(n)
        h_obs = np.stack([o_all[starts - c.m_h + j] for j in range(c.m_h)], axis=1)
        h_act = np.stack([a_all[starts - c.m_h + j] for j in range(c.m_h)], axis=1)
        fut_obs = np.stack([o_all[starts + j] for j in range(c.m_f + 1)], axis=1)
        fut_act = np.stack([a_all[starts + j] for j in range(c.m_f)], axis=1)
        rewards = r_all[starts]
    init = simulate_lqg(model, policy_b, n_init, c.m_f, rng, burn_in=c.m) if n_init else None
    dy, du = model.obs_dim, model.action_dim
    if init is None:
        z_obs, z_act = np.zeros((0, c.m, dy)), np.zeros((0, c.m, du))
        f_obs, f_act = np.zeros((0, c.m_f, dy)), np.zeros((0, c.m_f - 1, du))
    else:
        z_obs, z_act = init.prefix_obs, init.prefix_acts
        f_obs, f_act = init.obs, init.acts[:, :c.m_f - 1]
    return OfflineDataset(c, 0, 0, h_obs, h_act, fut_obs, fut_act, rewards, z_obs, z_act, f_obs, f_act,
                          provenance={"seed": seed, "mode": mode, "generator": "lqg", "burn_in": burn})


# -- persistence -----------------------------------------------------------------

def save_dataset(ds: OfflineDataset, path) -> None:
    """JSON lines: a header line, then one line per tuple, then one per initial sample."""
    header = {
        "format": FORMAT_NAME, "version": FORMAT_VERSION, "config": ds.config.to_dict(),
        "n_obs": ds.n_obs, "n_actions": ds.n_actions, "n": ds.n, "n_init": ds.n_init,
        "weighted": ds.weights is not None, "provenance": ds.provenance,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for i in range(ds.n):
            rec = {"kind": "tra", "h_obs": ds.h_obs[i].tolist(), "h_act": ds.h_act[i].tolist(),
                   "fut_obs": ds.fut_obs[i].tolist(), "fut_act": ds.fut_act[i].tolist(),
                   "r": float(ds.rewards[i])}
            if ds.weights is not None:
                rec["w"] = float(ds.weights[i])
            fh.write(json.dumps(rec) + "\n")
        for i in range(ds.n_init):
            rec = {"kind": "ini", "z_obs": ds.init_z_obs[i].tolist(), "z_act": ds.init_z_act[i].tolist(),
                   "f_obs": ds.init_f_obs[i].tolist(), "f_act": ds.init_f_act[i].tolist()}
            if ds.init_weights is not None:
                rec["w"] = float(ds.init_weights[i])
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path, expected_config: WindowConfig | None = None) -> OfflineDataset:
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file (missing header)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}:1: malformed header ({exc.msg})") from None
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}:1: not a {FORMAT_NAME} v{FORMAT_VERSION} file")
    try:
        config = WindowConfig.from_dict(header["config"])
    except (KeyError, TypeError, ConfigurationError) as exc:
        raise DatasetFormatError(f"{path}:1: bad window config ({exc})") from None
    if expected_config is not None and expected_config != config:
        raise DatasetFormatError(f"{path}: window config {config} does not match expected {expected_config}")
    tra, ini = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            kind = rec["kind"]
            if kind == "tra":
                tra.append((rec["h_obs"], rec["h_act"], rec["fut_obs"], rec["fut_act"], float(rec["r"]), rec.get("w")))
            elif kind == "ini":
                ini.append((rec["z_obs"], rec["z_act"], rec["f_obs"], rec["f_act"], rec.get("w")))
            else:
                raise KeyError("kind")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{path}:{lineno}: malformed record ({exc})") from None
    if "n" in header and header["n"] != len(tra):
        raise DatasetFormatError(f"{path}: header declares {header['n']} tuples, found {len(tra)}")
    if "n_init" in header and header["n_init"] != len(ini):
        raise DatasetFormatError(f"{path}: header declares {header['n_init']} initial samples, found {len(ini)}")
    int_like = header.get("n_obs", 0) > 0

    def column(rows, j, width, extra=()):
        dtype = np.int64 if int_like else float
        if not rows:
            return np.zeros((0, width) + extra, dtype=dtype)
        try:
            return np.asarray([r[j] for r in rows], dtype=dtype).reshape(len(rows), width, *extra)
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: ragged column ({exc})") from None

    c = config
    weights = np.asarray([r[5] for r in tra], float) if header.get("weighted") else None
    init_weights = np.asarray([r[4] for r in ini], float) if header.get("weighted") and ini and ini[0][4] is not None else None
    try:
        return OfflineDataset(
            c, int(header.get("n_obs", 0)), int(header.get("n_actions", 0)),
            column(tra, 0, c.m_h), column(tra, 1, c.m_h), column(tra, 2, c.m_f + 1), column(tra, 3, c.m_f),
            np.asarray([r[4] for r in tra], float),
            column(ini, 0, c.m), column(ini, 1, c.m), column(ini, 2, c.m_f), column(ini, 3, c.m_f - 1),
            weights, init_weights, header.get("provenance", {}))
    except DatasetFormatError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from None
