"""Experiment configuration: a strict, versioned JSON schema."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import WindowConfig
from .errors import ConfigurationError
from .model import (LQGModel, MemoryPolicy, TabularPOMDP, load_model, model_from_dict, observation_policy,
                    random_memory_policy, random_tabular_pomdp, uniform_policy)

SPEC_VERSION = 1
ESTIMATORS = ("minimax_linear", "population_linear", "minimax_rkhs", "finite_horizon_linear", "sis", "lstd",
              "lstd_equivalence")
TOP_KEYS = {"spec_version", "name", "model", "behavior_policy", "evaluation_policy", "window", "history_features",
            "estimators", "n_grid", "seeds", "n_init", "generation_mode", "initial", "initial_mean", "dynamics",
            "output_dir", "description"}


@dataclass(frozen=True)
class EstimatorSpec:
    name: str
    params: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return self.params.get("label", self.name)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    model: TabularPOMDP | LQGModel
    behavior_policy: MemoryPolicy
    evaluation_policy: MemoryPolicy
    window: WindowConfig
    estimators: tuple
    n_grid: tuple
    seeds: tuple
    history_features: str = "one-hot"
    n_init: int | None = None
    generation_mode: str = "iid-per-tuple"
    initial: str = "burn-in"
    initial_mean: str = "empirical"
    dynamics: dict | None = None
    output_dir: str = "results"
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def is_tabular(self) -> bool:
        return isinstance(self.model, TabularPOMDP)

    def with_seeds(self, seeds) -> "ExperimentConfig":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields["seeds"] = tuple(int(s) for s in seeds)
        return ExperimentConfig(**fields)


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigurationError(f"{where}: missing required field {key!r}")
    return d[key]


def build_model(spec: dict, base_dir: Path):
    if "path" in spec:
        path = (base_dir / spec["path"]).resolve()
        if not path.exists():
            raise ConfigurationError(f"model file {path} does not exist")
        return load_model(path)
    kind = _require(spec, "kind", "model")
    if kind == "random-tabular":
        return random_tabular_pomdp(int(spec["n_states"]), int(spec["n_obs"]), int(spec["n_actions"]),
                                    float(spec.get("gamma", 0.9)), int(spec.get("seed", 0)),
                                    float(spec.get("concentration", 1.0)))
    if kind == "fully-observed":
        base = random_tabular_pomdp(int(spec["n_states"]), int(spec["n_states"]), int(spec["n_actions"]),
                                    float(spec.get("gamma", 0.9)), int(spec.get("seed", 0)))
        return TabularPOMDP(base.transition, np.eye(base.n_states), base.reward, base.gamma,
                            base.initial_state_dist)
    if kind in ("tabular", "lqg"):
        return model_from_dict(spec)
    raise ConfigurationError(f"unknown model kind {kind!r}")


def build_policy(spec: dict, model, memory: int, where: str) -> MemoryPolicy:
    kind = _require(spec, "kind", where)
    if isinstance(model, LQGModel):
        if kind != "linear-gain":
            raise ConfigurationError(f"{where}: LQG models need a linear-gain policy")
        return MemoryPolicy.from_dict(spec)
    n_o, n_a = model.n_obs, model.n_actions
    mem = int(spec.get("memory", memory))
    if kind == "uniform":
        return uniform_policy(n_o, n_a, mem)
    if kind == "random":
        return random_memory_policy(n_o, n_a, mem, int(spec.get("seed", 0)), float(spec.get("min_prob", 0.05)))
    if kind == "observation":
        return observation_policy(_require(spec, "action_probs", where), mem)
    if kind == "table":
        return MemoryPolicy.from_dict(spec)
    raise ConfigurationError(f"{where}: unknown policy kind {kind!r}")


def parse_config(d: dict, base_dir: Path | str = ".") -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigurationError("config must be a JSON object")
    version = d.get("spec_version")
    if version != SPEC_VERSION:
        raise ConfigurationError(f"spec_version must be {SPEC_VERSION}, got {version!r}")
    unknown = set(d) - TOP_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
    base_dir = Path(base_dir)
    model = build_model(_require(d, "model", "config"), base_dir)
    w = _require(d, "window", "config")
    window = WindowConfig(int(w.get("m", 0)), int(w.get("m_h", 1)), int(w.get("m_f", 1)))
    pb = build_policy(_require(d, "behavior_policy", "config"), model, window.m, "behavior_policy")
    pe = build_policy(_require(d, "evaluation_policy", "config"), model, window.m, "evaluation_policy")
    ests = d.get("estimators", [])
    if not ests:
        raise ConfigurationError("at least one estimator is required")
    specs = []
    for e in ests:
        name = e if isinstance(e, str) else _require(e, "name", "estimator")
        if name not in ESTIMATORS:
            raise ConfigurationError(f"unknown estimator {name!r}; choose from {ESTIMATORS}")
        params = {} if isinstance(e, str) else {k: v for k, v in e.items() if k != "name"}
        specs.append(EstimatorSpec(name, params))
    n_grid = tuple(int(n) for n in d.get("n_grid", [1000]))
    if not n_grid or any(n < 0 for n in n_grid) or any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ConfigurationError("n_grid must be a nonempty strictly increasing list of nonnegative integers")
    seeds = d.get("seeds", [0])
    if isinstance(seeds, dict):
        seeds = list(range(int(seeds.get("start", 0)), int(seeds.get("start", 0)) + int(seeds["count"])))
    if not seeds:
        raise ConfigurationError("seeds must be nonempty")
    mode = d.get("generation_mode", "iid-per-tuple")
    if mode not in ("iid-per-tuple", "sliced-trajectory"):
        raise ConfigurationError(f"unknown generation_mode {mode!r}")
    initial = d.get("initial", "burn-in")
    if initial not in ("burn-in", "stationary"):
        raise ConfigurationError("initial must be 'burn-in' or 'stationary'")
    initial_mean = d.get("initial_mean", "empirical")
    if initial_mean not in ("empirical", "exact"):
        raise ConfigurationError("initial_mean must be 'empirical' or 'exact'")
    hist = d.get("history_features", "one-hot")
    if hist not in ("one-hot", "current-observation"):
        raise ConfigurationError("history_features must be 'one-hot' or 'current-observation'")
    return ExperimentConfig(
        name=str(d.get("name", "experiment")), model=model, behavior_policy=pb, evaluation_policy=pe,
        window=window, estimators=tuple(specs), n_grid=n_grid, seeds=tuple(int(s) for s in seeds),
        history_features=hist, n_init=None if d.get("n_init") is None else int(d["n_init"]),
        generation_mode=mode, initial=initial, initial_mean=initial_mean, dynamics=d.get("dynamics"),
        output_dir=str(d.get("output_dir", "results")), raw=d)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return parse_config(d, path.parent)


def bundled_scenarios() -> dict:
    """Name -> path of the scenario configs shipped with the package."""
    root = Path(__file__).parent / "scenarios"
    return {p.stem: p for p in sorted(root.glob("*.json"))}


def resolve_config_path(name_or_path: str) -> Path:
    """A file path, or the name of a bundled scenario."""
    p = Path(name_or_path)
    if p.exists():
        return p
    scenarios = bundled_scenarios()
    if name_or_path in scenarios:
        return scenarios[name_or_path]
    raise ConfigurationError(f"no config file or bundled scenario named {name_or_path!r}")
