"""Experiment runner: n-grid x seed-grid cells, oracle comparison and result files."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import generate_offline_dataset
from .diagnostics import ConditionReport, diagnose
from .errors import ConfigurationError, OPEError
from .estimators import (EstimatorConfig, compute_moments_empirical, compute_moments_population, exact_nu_mean,
                         finite_horizon_linear, minimax_linear, minimax_rkhs, sis_estimate)
from .features import (current_observation_features, gaussian_kernel, linear_kernel, one_hot_fbar,
                       one_hot_history)
from .lstd import lstd_value
from .oracles import (burn_in_initial_distribution, exact_finite_horizon_value, exact_policy_value,
                      joint_sequence_probability, predictive_distribution, stationary_initial_distribution)
from .simulate import simulate_tabular

CSV_COLUMNS = ("estimator", "n", "seed", "j_hat", "j_true", "abs_error", "diagnostics_hash", "status", "message")
CSV_DOC = {
    "estimator": "estimator label from the config",
    "n": "number of transition tuples",
    "seed": "experiment seed of the cell",
    "j_hat": "estimated policy value",
    "j_true": "oracle value (for lstd_equivalence: the independent LSTD value on the same data)",
    "abs_error": "|j_hat - j_true|",
    "diagnostics_hash": "first 12 hex digits of the SHA-256 of the diagnostics report JSON",
    "status": "ok, error or skipped",
    "message": "error text when status is not ok",
}


@dataclass
class ResultRow:
    estimator: str
    n: int
    seed: int
    j_hat: float = math.nan
    j_true: float = math.nan
    abs_error: float = math.nan
    runtime_ms: float = 0.0
    diagnostics_hash: str = ""
    status: str = "ok"
    message: str = ""
    extras: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        rec = {k: getattr(self, k) for k in ("estimator", "n", "seed", "j_hat", "j_true", "abs_error", "runtime_ms",
                                             "diagnostics_hash", "status", "message")}
        rec["extras"] = self.extras
        return {k: _json_safe(v) for k, v in rec.items()}


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (np.floating, np.integer)):
        return _json_safe(v.item())
    return v


def resolve_jobs(jobs: int | None) -> int:
    if jobs is None:
        env = os.environ.get("POMDP_OPE_JOBS")
        if env:
            try:
                jobs = int(env)
            except ValueError:
                raise ConfigurationError(f"POMDP_OPE_JOBS must be an integer, got {env!r}") from None
        else:
            jobs = 1
    if jobs < 1:
        raise ConfigurationError("jobs must be >= 1")
    return jobs


def cell_seed(seed: int, n: int) -> int:
    """Dataset seed of the (seed, n) cell; independent streams across cells."""
    return int(np.random.SeedSequence([int(seed), int(n)]).generate_state(1)[0])


def window_policy(policy, m):
    return policy.with_memory(m) if policy.memory < m else policy


def initial_table(cfg: ExperimentConfig):
    """Law of ``(Z_0, S_0)`` shared by the oracle and ``D_ini``."""
    pb = window_policy(cfg.behavior_policy, cfg.window.m)
    if cfg.initial == "stationary":
        return stationary_initial_distribution(cfg.model, pb, cfg.window.m)
    return burn_in_initial_distribution(cfg.model, pb)


def true_value(cfg: ExperimentConfig, horizon: int | None = None) -> float:
    if not cfg.is_tabular:
        return math.nan
    pe = window_policy(cfg.evaluation_policy, cfg.window.m)
    init = initial_table(cfg)
    if horizon is None:
        return exact_policy_value(cfg.model, pe, init)
    return exact_finite_horizon_value(cfg.model, pe, init, horizon)


def feature_maps(cfg: ExperimentConfig, history: str | None = None):
    m = cfg.model
    phi_f = one_hot_fbar(cfg.window, m.n_obs, m.n_actions)
    if (history or cfg.history_features) == "current-observation":
        phi_h = current_observation_features(m.n_obs)
    else:
        phi_h = one_hot_history(cfg.window, m.n_obs, m.n_actions)
    return phi_f, phi_h


def estimator_config(params: dict, gamma: float, default_lam: float = 1.0) -> EstimatorConfig:
    return EstimatorConfig(float(params.get("lambda", default_lam)), float(params.get("alpha", 0.0)),
                           float(params.get("alpha_prime", 0.0)), gamma)


def _kernel(name: str, domain: str, params: dict, feature_map):
    if name == "linear":
        return linear_kernel(domain, feature_map if params.get("kernel_features", True) else None)
    if name == "gaussian":
        return gaussian_kernel(domain, params.get("bandwidth"))
    raise ConfigurationError(f"unknown kernel {name!r}")


class Cell:
    """Shared per-cell state: one dataset (generated unless given), cached moments."""

    def __init__(self, cfg: ExperimentConfig, n: int, seed: int, ds=None):
        self.cfg, self.n, self.seed = cfg, n, seed
        self.init = initial_table(cfg)
        if ds is None:
            n_init = cfg.n_init if cfg.n_init is not None else max(n, 1)
            ds = generate_offline_dataset(cfg.model, cfg.behavior_policy, n, n_init, cfg.window,
                                          cfg.generation_mode, cell_seed(seed, n), self.init)
        self.ds = ds
        self.gamma = cfg.model.gamma
        self._moments = {}

    def nu_mean(self, phi_f):
        if self.cfg.initial_mean == "exact":
            return exact_nu_mean(self.cfg.model, self.cfg.behavior_policy, self.cfg.window, phi_f, self.init)
        return None

    def moments(self, history: str | None = None):
        key = history or self.cfg.history_features
        if key not in self._moments:
            phi_f, phi_h = feature_maps(self.cfg, key)
            self._moments[key] = compute_moments_empirical(
                self.ds, phi_f, phi_h, self.cfg.evaluation_policy, self.cfg.behavior_policy, self.gamma,
                self.nu_mean(phi_f))
        return self._moments[key]

    def lstd(self) -> float:
        cfg, ds = self.cfg, self.ds
        if cfg.window.m != 0 or cfg.window.m_f != 1:
            raise ConfigurationError("LSTD comparison needs M = 0 and M_F = 1")
        return lstd_value(ds.fut_obs[:, 0], ds.fut_act[:, 0], ds.rewards, ds.fut_obs[:, 1], ds.init_f_obs[:, 0],
                          cfg.evaluation_policy.table[0], cfg.behavior_policy.table[0], self.gamma, ds.n_obs)


def estimate_row(cell: Cell, spec) -> ResultRow:
    cfg, p = cell.cfg, spec.params
    row = ResultRow(spec.label, cell.n, cell.seed)
    j_true = true_value(cfg)
    if spec.name == "minimax_linear":
        est = minimax_linear(cell.moments(p.get("history_features")), estimator_config(p, cell.gamma))
        row.j_hat, row.extras = est.j_hat, {"residual_norm": est.residual_norm}
    elif spec.name == "population_linear":
        phi_f, phi_h = feature_maps(cfg, p.get("history_features"))
        mom = compute_moments_population(cfg.model, cfg.behavior_policy, cfg.evaluation_policy, phi_f, phi_h,
                                         cfg.window, cell.init)
        est = minimax_linear(mom, estimator_config(p, cell.gamma, default_lam=0.0))
        row.j_hat, row.extras = est.j_hat, {"residual_norm": est.residual_norm}
    elif spec.name == "finite_horizon_linear":
        horizon = int(p.get("horizon", 3))
        est = finite_horizon_linear(cell.moments(p.get("history_features")), horizon)
        row.j_hat, j_true = est.j_hat, true_value(cfg, horizon)
    elif spec.name == "minimax_rkhs":
        if cell.n > int(p.get("max_n", 2000)):
            row.status, row.message = "skipped", f"n exceeds max_n={p.get('max_n', 2000)}"
            return row
        phi_f, phi_h = feature_maps(cfg, p.get("history_features"))
        kname = p.get("kernel", "gaussian")
        est = minimax_rkhs(cell.ds, _kernel(kname, "fbar", p, phi_f), _kernel(kname, "history", p, phi_h),
                           estimator_config(p, cell.gamma), cfg.evaluation_policy, cfg.behavior_policy, cell.gamma)
        row.j_hat = est.j_hat
    elif spec.name == "sis":
        cap = int(p.get("horizon_cap", math.ceil(1.0 / (1.0 - cell.gamma))))
        width = max(cfg.evaluation_policy.memory, cfg.behavior_policy.memory, cfg.window.m)
        rng = np.random.default_rng(cell_seed(cell.seed, cell.n) + 1)
        traj = simulate_tabular(cfg.model, window_policy(cfg.behavior_policy, width), max(cell.n, 1), cap, rng,
                                init_table=initial_table(cfg) if width == cfg.window.m else None)
        res = sis_estimate(traj, cfg.evaluation_policy, cfg.behavior_policy, cell.gamma, cap)
        row.j_hat = res.j_hat
        row.extras = {"horizon_cap": cap, "log_weight_variance": res.log_weight_variance, "stderr": res.stderr}
    elif spec.name == "lstd":
        row.j_hat = cell.lstd()
    elif spec.name == "lstd_equivalence":
        est = minimax_linear(cell.moments("current-observation"), EstimatorConfig.exact(cell.gamma))
        row.j_hat, j_true = est.j_hat, cell.lstd()
    row.j_true = j_true
    if math.isfinite(j_true):
        row.abs_error = abs(row.j_hat - j_true)
    return row


def run_cell(cfg: ExperimentConfig, n: int, seed: int, diag_hash: str = "") -> list[ResultRow]:
    """All estimators on one (n, seed) cell; failures become error rows."""
    try:
        cell = Cell(cfg, n, seed)
    except OPEError as exc:
        return [ResultRow(s.label, n, seed, status="error", message=str(exc), diagnostics_hash=diag_hash)
                for s in cfg.estimators]
    rows = []
    for spec in cfg.estimators:
        start = time.perf_counter()
        try:
            row = estimate_row(cell, spec)
        except (OPEError, np.linalg.LinAlgError) as exc:
            row = ResultRow(spec.label, n, seed, status="error", message=f"{type(exc).__name__}: {exc}")
        row.runtime_ms = 1000.0 * (time.perf_counter() - start)
        row.diagnostics_hash = diag_hash
        rows.append(row)
    return rows


def _run_cell_args(args):
    return run_cell(*args)


def run_sweep(cfg: ExperimentConfig, jobs: int = 1, diag_hash: str = "") -> list[ResultRow]:
    """Every (n, seed) cell; row order is (n, seed, estimator) regardless of ``jobs``."""
    cells = [(cfg, n, s, diag_hash) for n in cfg.n_grid for s in cfg.seeds]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell_args, cells))
    else:
        results = [run_cell(*c) for c in cells]
    return [row for rows in results for row in rows]


def diagnostics_report(cfg: ExperimentConfig) -> ConditionReport | None:
    if not cfg.is_tabular:
        return None
    return diagnose(cfg.model, window_policy(cfg.behavior_policy, cfg.window.m), cfg.evaluation_policy,
                    cfg.window, initial_table(cfg))


def report_hash(report: ConditionReport | None) -> str:
    if report is None:
        return ""
    return hashlib.sha256(report.to_json().encode()).hexdigest()[:12]


def slope_fits(rows: list[ResultRow]) -> dict:
    """Per estimator: least-squares slope of mean log|error| against log n (needs >= 2 grid points)."""
    out = {}
    for name in dict.fromkeys(r.estimator for r in rows):
        by_n = {}
        for r in rows:
            if r.estimator == name and r.status == "ok" and math.isfinite(r.abs_error) and r.n > 0:
                by_n.setdefault(r.n, []).append(math.log(max(r.abs_error, 1e-300)))
        if len(by_n) >= 2:
            ns = sorted(by_n)
            x = np.log(ns)
            y = np.array([np.mean(by_n[n]) for n in ns])
            out[name] = {"slope": float(np.polyfit(x, y, 1)[0]), "n": ns, "mean_log_error": y.tolist()}
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.17g}"
    return str(v)


def results_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def render_report(cfg: ExperimentConfig, rows, slopes, report: ConditionReport | None, dynamics=None) -> str:
    lines = [f"# Experiment report: {cfg.name}", "", "## results.csv columns", ""]
    lines += [f"- `{c}`: {CSV_DOC[c]}" for c in CSV_COLUMNS]
    lines += ["", "Per-row runtimes (`runtime_ms`) and estimator extras are in results.jsonl.", ""]
    lines += ["## Summary", "", "| estimator | n | mean abs error | rows ok |", "|---|---|---|---|"]
    for name in dict.fromkeys(r.estimator for r in rows):
        for n in cfg.n_grid:
            sel = [r for r in rows if r.estimator == name and r.n == n]
            ok = [r.abs_error for r in sel if r.status == "ok" and math.isfinite(r.abs_error)]
            mean = f"{np.mean(ok):.3e}" if ok else "n/a"
            lines.append(f"| {name} | {n} | {mean} | {sum(r.status == 'ok' for r in sel)}/{len(sel)} |")
    lines += ["", "## Error-vs-n slope fits", ""]
    if slopes:
        lines += ["| estimator | slope of mean log abs error vs log n |", "|---|---|"]
        lines += [f"| {k} | {v['slope']:.4f} |" for k, v in slopes.items()]
    else:
        lines.append("Fewer than two grid sizes with oracle errors; no slope fitted.")
    lines += ["", "## Diagnostics", ""]
    if report is None:
        lines.append("Diagnostics are available for tabular models only.")
    else:
        lines += ["| quantity | value |", "|---|---|"]
        lines += [f"| {k} | {v} |" for k, v in report.to_dict().items() if k != "notes"]
        lines += [""] + [f"**Warning:** {note}" for note in report.notes]
    if dynamics:
        lines += ["", "## Dynamics", "", "| sequence | source | estimate | truth | abs error |", "|---|---|---|---|---|"]
        for d in dynamics:
            lines.append(f"| {d['sequence']} | {d['source']} | {d['estimate']:.6g} | {d['truth']:.6g} | "
                         f"{d['abs_error']:.3e} |")
    return "\n".join(lines) + "\n"


def run_dynamics(cfg: ExperimentConfig) -> list[dict]:
    """Population (and, with ``empirical_n``, empirical) joint-probability estimates vs the forward algorithm."""
    from .dynamics import estimate_dynamics_moments, minimax_dynamics, population_dynamics_moments, \
        spectral_conditional_distribution, spectral_joint_probability
    spec = cfg.dynamics or {}
    seqs = [[tuple(p) for p in s] for s in spec.get("sequences", [])]
    if not seqs:
        raise ConfigurationError("dynamics section needs a nonempty 'sequences' list")
    pe, pb = cfg.evaluation_policy, cfg.behavior_policy
    init = cfg.model.initial_state_dist[None, :]
    sources = [("population", population_dynamics_moments(cfg.model, pe, pb, cfg.window, init_table=init))]
    if spec.get("empirical_n"):
        n = int(spec["empirical_n"])
        ds = generate_offline_dataset(cfg.model, pb, n, n, cfg.window, cfg.generation_mode,
                                      cell_seed(cfg.seeds[0], n), init)
        sources.append((f"empirical(n={n})", estimate_dynamics_moments(ds, pe, pb)))
    out = []
    for seq in seqs:
        truth = joint_sequence_probability(cfg.model, pe, seq)
        pred = predictive_distribution(cfg.model, pe, seq)
        for name, mom in sources:
            est = spectral_joint_probability(mom, seq)
            rec = {"sequence": [list(p) for p in seq], "source": name, "estimate": est, "truth": truth,
                   "abs_error": abs(est - truth), "minimax": minimax_dynamics(mom, seq)}
            try:
                cond = spectral_conditional_distribution(mom, seq)
                rec["conditional_max_error"] = float(np.max(np.abs(cond - pred)))
            except OPEError as exc:
                rec["conditional_max_error"] = None
                rec["conditional_error"] = str(exc)
            out.append(rec)
    return out


def write_outputs(out_dir, cfg: ExperimentConfig, rows, report=None, dynamics=None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    slopes = slope_fits(rows)
    (out / "results.csv").write_text(results_csv(rows))
    with open(out / "results.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r.to_record(), sort_keys=True) + "\n")
    if report is not None:
        (out / "diagnostics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if dynamics:
        with open(out / "dynamics.jsonl", "w") as fh:
            for d in dynamics:
                fh.write(json.dumps(_json_safe(d), sort_keys=True) + "\n")
    (out / "report.md").write_text(render_report(cfg, rows, slopes, report, dynamics))
    return slopes


def run_experiment(cfg: ExperimentConfig, out_dir, jobs: int = 1):
    """Diagnostics, the full sweep, optional dynamics, and all output files."""
    report = diagnostics_report(cfg)
    rows = run_sweep(cfg, jobs, report_hash(report))
    dynamics = run_dynamics(cfg) if cfg.dynamics else None
    slopes = write_outputs(out_dir, cfg, rows, report, dynamics)
    return rows, slopes, report, dynamics
