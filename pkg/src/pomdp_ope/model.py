"""Environment models and M-memory policies.

Observation-action windows are encoded as integers. A pair ``(o, a)`` has
code ``o * n_actions + a`` and a window of W pairs is read in base
``K = n_obs * n_actions`` with the oldest pair as the most significant digit.
Memory tuples ``z`` of a policy use the same encoding with ``W = M``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

ROW_SUM_TOL = 1e-12


def _check_stochastic(name: str, table: np.ndarray, tol: float = ROW_SUM_TOL) -> None:
    if not np.all(np.isfinite(table)):
        raise ConfigurationError(f"{name} has non-finite entries")
    if np.any(table < 0):
        raise ConfigurationError(f"{name} has negative entries")
    err = np.max(np.abs(table.sum(axis=-1) - 1.0)) if table.size else 0.0
    if err > tol:
        raise ConfigurationError(f"{name} rows do not sum to 1 (max error {err:.2e})")


def _normalize_rows(table: np.ndarray) -> np.ndarray:
    return table / table.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class TabularPOMDP:
    """Finite POMDP. ``transition[s, a, s']``, ``emission[s, o]``, ``reward[s, a]``."""

    transition: np.ndarray
    emission: np.ndarray
    reward: np.ndarray
    gamma: float
    initial_state_dist: np.ndarray

    def __post_init__(self):
        for name in ("transition", "emission", "reward", "initial_state_dist"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        t, e, r = self.transition, self.emission, self.reward
        if t.ndim != 3 or t.shape[0] != t.shape[2]:
            raise ConfigurationError(f"transition must have shape (S, A, S), got {t.shape}")
        n_s, n_a = t.shape[0], t.shape[1]
        if e.ndim != 2 or e.shape[0] != n_s:
            raise ConfigurationError(f"emission must have shape ({n_s}, O), got {e.shape}")
        if r.shape != (n_s, n_a):
            raise ConfigurationError(f"reward must have shape ({n_s}, {n_a}), got {r.shape}")
        if self.initial_state_dist.shape != (n_s,):
            raise ConfigurationError("initial_state_dist has wrong length")
        _check_stochastic("transition", t)
        _check_stochastic("emission", e)
        _check_stochastic("initial_state_dist", self.initial_state_dist)
        if not np.all(np.isfinite(r)):
            raise ConfigurationError("reward entries must be finite")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1), got {self.gamma}")
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_obs(self) -> int:
        return self.emission.shape[1]

    @property
    def n_pairs(self) -> int:
        return self.n_obs * self.n_actions

    def with_gamma(self, gamma: float) -> "TabularPOMDP":
        return TabularPOMDP(self.transition, self.emission, self.reward, gamma, self.initial_state_dist)

    def with_reward(self, reward) -> "TabularPOMDP":
        return TabularPOMDP(self.transition, self.emission, reward, self.gamma, self.initial_state_dist)

    def permute_observations(self, perm) -> "TabularPOMDP":
        """Relabel observation ``o`` as ``perm[o]``."""
        perm = np.asarray(perm)
        emission = np.empty_like(self.emission)
        emission[:, perm] = self.emission
        return TabularPOMDP(self.transition, emission, self.reward, self.gamma, self.initial_state_dist)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_obs": self.n_obs,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "emission": self.emission.tolist(),
            "reward": self.reward.tolist(),
            "gamma": self.gamma,
            "initial_state_dist": self.initial_state_dist.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularPOMDP":
        try:
            model = cls(d["transition"], d["emission"], d["reward"], d["gamma"], d["initial_state_dist"])
        except KeyError as exc:
            raise ConfigurationError(f"model file missing key {exc}") from None
        for key, value in (("n_states", model.n_states), ("n_obs", model.n_obs), ("n_actions", model.n_actions)):
            if key in d and int(d[key]) != value:
                raise ConfigurationError(f"{key}={d[key]} disagrees with array shapes ({value})")
        return model


@dataclass(frozen=True, eq=False)
class LQGModel:
    """Linear-quadratic-Gaussian system.

    ``s' = A s + B a + e1``, ``o = C s + e2``, ``r = -s'Qs - a'Ra``.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    noise_cov_state: np.ndarray
    noise_cov_obs: np.ndarray
    gamma: float = 0.9
    initial_mean: np.ndarray | None = None
    initial_cov: np.ndarray | None = None

    def __post_init__(self):
        for name in ("A", "B", "C", "Q", "R", "noise_cov_state", "noise_cov_obs"):
            object.__setattr__(self, name, np.atleast_2d(np.array(getattr(self, name), dtype=float)))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ConfigurationError("A must be square")
        if self.B.shape[0] != n:
            raise ConfigurationError("B must have as many rows as A")
        if self.C.shape[1] != n:
            raise ConfigurationError("C must have as many columns as A has rows")
        if self.Q.shape != (n, n) or self.R.shape != (self.B.shape[1],) * 2:
            raise ConfigurationError("cost matrices have wrong shape")
        if self.noise_cov_state.shape != (n, n) or self.noise_cov_obs.shape != (self.C.shape[0],) * 2:
            raise ConfigurationError("noise covariances have wrong shape")
        for name in ("Q", "R", "noise_cov_state", "noise_cov_obs"):
            _check_psd(name, getattr(self, name))
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in [0, 1)")
        mean = np.zeros(n) if self.initial_mean is None else np.asarray(self.initial_mean, float)
        cov = np.eye(n) if self.initial_cov is None else np.atleast_2d(np.asarray(self.initial_cov, float))
        _check_psd("initial_cov", cov)
        object.__setattr__(self, "initial_mean", mean)
        object.__setattr__(self, "initial_cov", cov)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def action_dim(self) -> int:
        return self.B.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.C.shape[0]

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist() for k in
                ("A", "B", "C", "Q", "R", "noise_cov_state", "noise_cov_obs", "initial_mean", "initial_cov")} | {
            "gamma": self.gamma}

    @classmethod
    def from_dict(cls, d: dict) -> "LQGModel":
        return cls(**{k: d[k] for k in d if k != "kind"})


def _check_psd(name: str, m: np.ndarray, tol: float = 1e-10) -> None:
    if not np.allclose(m, m.T, atol=tol):
        raise ConfigurationError(f"{name} is not symmetric")
    if m.size and np.linalg.eigvalsh(m)[0] < -tol:
        raise ConfigurationError(f"{name} is not positive semidefinite")


@dataclass(frozen=True, eq=False)
class MemoryPolicy:
    """Stochastic M-memory policy ``pi(a | z, o)``.

    Tabular kind: ``table[z_index, o, a]`` with ``z_index`` the window code of
    the last M pairs. Linear-gain kind (LQG): ``a = gain @ [o, z] + noise``.
    """

    memory: int
    table: np.ndarray | None = None
    gain: np.ndarray | None = None
    noise_std: float = 0.0
    kind: str = field(default="")

    def __post_init__(self):
        if self.memory < 0:
            raise ConfigurationError("memory must be nonnegative")
        if self.table is not None:
            table = np.array(self.table, dtype=float)
            if table.ndim != 3:
                raise ConfigurationError("policy table must have shape (|Z|, O, A)")
            n_pairs = table.shape[1] * table.shape[2]
            if table.shape[0] != n_pairs ** self.memory:
                raise ConfigurationError(
                    f"policy table has {table.shape[0]} memory rows, expected {n_pairs ** self.memory} for M={self.memory}")
            _check_stochastic("policy table", table)
            object.__setattr__(self, "table", table)
            object.__setattr__(self, "kind", "tabular-table")
        elif self.gain is not None:
            object.__setattr__(self, "gain", np.atleast_2d(np.array(self.gain, dtype=float)))
            object.__setattr__(self, "kind", "linear-gain")
        else:
            raise ConfigurationError("policy needs either a table or a gain")

    @property
    def n_obs(self) -> int:
        return self.table.shape[1]

    @property
    def n_actions(self) -> int:
        return self.table.shape[2]

    def probs(self, z_index, o) -> np.ndarray:
        return self.table[z_index, o]

    def check_compatible(self, model: TabularPOMDP) -> None:
        if self.kind != "tabular-table":
            raise ConfigurationError("tabular model needs a tabular policy")
        if (self.n_obs, self.n_actions) != (model.n_obs, model.n_actions):
            raise ConfigurationError(
                f"policy is over {self.n_obs} obs x {self.n_actions} actions, model has "
                f"{model.n_obs} x {model.n_actions}")

    def with_memory(self, memory: int) -> "MemoryPolicy":
        """Same decision rule viewed as a policy with longer memory (ignores extra pairs)."""
        if memory < self.memory:
            raise ConfigurationError("cannot shrink policy memory")
        reps = (self.n_obs * self.n_actions) ** (memory - self.memory)
        return MemoryPolicy(memory, table=np.tile(self.table, (reps, 1, 1)))

    def permute_observations(self, perm) -> "MemoryPolicy":
        if self.memory:
            raise ConfigurationError("observation relabeling is only implemented for memory-less policies")
        perm = np.asarray(perm)
        table = np.empty_like(self.table)
        table[:, perm] = self.table
        return MemoryPolicy(0, table=table)

    def to_dict(self) -> dict:
        if self.kind == "tabular-table":
            return {"kind": "table", "memory": self.memory, "table": self.table.tolist()}
        return {"kind": "linear-gain", "memory": self.memory, "gain": self.gain.tolist(), "noise_std": self.noise_std}

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryPolicy":
        if d.get("kind", "table") == "table":
            return cls(int(d["memory"]), table=d["table"])
        return cls(int(d["memory"]), gain=d["gain"], noise_std=float(d.get("noise_std", 0.0)))


# -- window codes -------------------------------------------------------------

def pair_code(o, a, n_actions: int):
    return np.asarray(o) * n_actions + np.asarray(a)


def encode_window(obs, acts, n_obs: int, n_actions: int):
    """Window code of pairs ``(obs[..., i], acts[..., i])``, oldest first."""
    obs = np.asarray(obs, dtype=np.int64)
    acts = np.asarray(acts, dtype=np.int64)
    k = n_obs * n_actions
    code = np.zeros(obs.shape[:-1], dtype=np.int64)
    for i in range(obs.shape[-1]):
        code = code * k + obs[..., i] * n_actions + acts[..., i]
    return code


def decode_window(code, width: int, n_obs: int, n_actions: int):
    """Inverse of :func:`encode_window`; returns ``(obs, acts)`` with a trailing axis of ``width``."""
    code = np.asarray(code, dtype=np.int64)
    k = n_obs * n_actions
    pairs = np.empty(code.shape + (width,), dtype=np.int64)
    rest = code.copy()
    for i in range(width - 1, -1, -1):
        pairs[..., i] = rest % k
        rest //= k
    return pairs // n_actions, pairs % n_actions


def shift_code(code, pair, width: int, n_pairs: int):
    """Drop the oldest pair of a window code and append the pair code ``pair``."""
    code = np.asarray(code, dtype=np.int64)
    if width == 0:
        return np.zeros_like(code)
    return (code * n_pairs + np.asarray(pair, dtype=np.int64)) % (n_pairs ** width)


def suffix_code(code, width: int, keep: int, n_pairs: int):
    """Code of the last ``keep`` pairs of a width-``width`` window."""
    code = np.asarray(code, dtype=np.int64)
    if keep > width:
        raise ConfigurationError("suffix longer than window")
    return code % (n_pairs ** keep)


# -- generators ---------------------------------------------------------------

def random_tabular_pomdp(n_states: int, n_obs: int, n_actions: int, gamma: float, seed: int,
                         concentration: float = 1.0, reward_range=(0.0, 1.0)) -> TabularPOMDP:
    """Dirichlet-random transition/emission rows and uniform-random rewards."""
    rng = np.random.default_rng(seed)
    transition = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    emission = rng.dirichlet(np.full(n_obs, concentration), size=n_states)
    reward = rng.uniform(*reward_range, size=(n_states, n_actions))
    init = rng.dirichlet(np.ones(n_states))
    return TabularPOMDP(_normalize_rows(transition), _normalize_rows(emission), reward, gamma, _normalize_rows(init))


def random_memory_policy(n_obs: int, n_actions: int, memory: int, seed: int, min_prob: float = 0.05) -> MemoryPolicy:
    """Random full-support policy; every action has probability >= ``min_prob``."""
    if min_prob * n_actions > 1.0:
        raise ConfigurationError("min_prob too large for the number of actions")
    rng = np.random.default_rng(seed)
    n_z = (n_obs * n_actions) ** memory
    raw = rng.dirichlet(np.ones(n_actions), size=(n_z, n_obs))
    table = min_prob + (1.0 - min_prob * n_actions) * raw
    return MemoryPolicy(memory, table=_normalize_rows(table))


def uniform_policy(n_obs: int, n_actions: int, memory: int = 0) -> MemoryPolicy:
    n_z = (n_obs * n_actions) ** memory
    return MemoryPolicy(memory, table=np.full((n_z, n_obs, n_actions), 1.0 / n_actions))


def observation_policy(action_probs, memory: int = 0) -> MemoryPolicy:
    """Memory-less rule ``pi(a | o) = action_probs[o, a]`` lifted to memory ``memory``."""
    action_probs = np.asarray(action_probs, dtype=float)
    base = MemoryPolicy(0, table=action_probs[None])
    return base.with_memory(memory) if memory else base


def load_model(path) -> TabularPOMDP | LQGModel:
    with open(path) as fh:
        d = json.load(fh)
    return model_from_dict(d)


def model_from_dict(d: dict) -> TabularPOMDP | LQGModel:
    if d.get("kind") == "lqg" or "A" in d:
        return LQGModel.from_dict(d)
    return TabularPOMDP.from_dict(d)


def save_model(model: TabularPOMDP | LQGModel, path) -> None:
    d = model.to_dict()
    if isinstance(model, LQGModel):
        d["kind"] = "lqg"
    Path(path).write_text(json.dumps(d))
