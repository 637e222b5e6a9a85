"""Command-line entry point: ``pomdp-ope <command> --config CONFIG [options]``.

``--config`` takes a JSON file or the name of a bundled scenario
(``pomdp-ope scenarios`` lists them).
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import harness
from .config import bundled_scenarios, load_config, resolve_config_path
from .data import generate_offline_dataset, load_dataset, save_dataset
from .errors import OPEError


def _load(args):
    cfg = load_config(resolve_config_path(args.config))
    if getattr(args, "seed_override", None) is not None:
        cfg = cfg.with_seeds([args.seed_override])
    return cfg


def _out_dir(args, cfg) -> Path:
    return Path(args.out if args.out else cfg.output_dir)


def _print_rows(rows, slopes) -> None:
    for r in rows:
        err = "" if math.isnan(r.abs_error) else f" abs_error={r.abs_error:.3e}"
        msg = f" ({r.message})" if r.message else ""
        print(f"{r.estimator:>24} n={r.n:<7} seed={r.seed:<4} j_hat={r.j_hat:.6g}{err} [{r.status}]{msg}")
    for name, fit in slopes.items():
        print(f"slope[{name}] = {fit['slope']:.4f}")


def cmd_run(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    rows, slopes, report, dynamics = harness.run_experiment(cfg, out, harness.resolve_jobs(args.jobs))
    _print_rows(rows, slopes)
    if report is not None:
        for note in report.notes:
            print(f"WARNING: {note}")
    print(f"wrote {out / 'results.csv'}, {out / 'results.jsonl'}, {out / 'report.md'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    rows = harness.run_sweep(cfg, harness.resolve_jobs(args.jobs))
    slopes = harness.write_outputs(out, cfg, rows)
    _print_rows(rows, slopes)
    print(f"wrote {out / 'results.csv'}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load(args)
    n = args.n if args.n is not None else cfg.n_grid[0]
    n_init = args.n_init if args.n_init is not None else (cfg.n_init if cfg.n_init is not None else n)
    seed = cfg.seeds[0]
    init = harness.initial_table(cfg) if cfg.is_tabular else None
    ds = generate_offline_dataset(cfg.model, cfg.behavior_policy, n, n_init, cfg.window, cfg.generation_mode,
                                  harness.cell_seed(seed, n), init)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dataset.jsonl"
    save_dataset(ds, path)
    print(f"wrote {ds.n} tuples and {ds.n_init} initial samples to {path}")
    return 0


def cmd_estimate(args) -> int:
    cfg = _load(args)
    ds = load_dataset(args.dataset, expected_config=cfg.window)
    cell = harness.Cell(cfg, ds.n, cfg.seeds[0], ds=ds)
    rows = []
    for spec in cfg.estimators:
        try:
            rows.append(harness.estimate_row(cell, spec))
        except OPEError as exc:
            rows.append(harness.ResultRow(spec.label, ds.n, cell.seed, status="error", message=str(exc)))
    _print_rows(rows, {})
    if args.out:
        harness.write_outputs(args.out, cfg, rows)
    return 0


def cmd_diagnose(args) -> int:
    cfg = _load(args)
    report = harness.diagnostics_report(cfg)
    if report is None:
        print("diagnostics need a tabular model", file=sys.stderr)
        return 2
    for k, v in report.to_dict().items():
        if k != "notes":
            print(f"{k:>28}: {v}")
    for note in report.notes:
        print(f"WARNING: {note}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "diagnostics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_dynamics(args) -> int:
    cfg = _load(args)
    if args.sequences:
        seqs = json.loads(args.sequences)
        cfg = cfg.__class__(**{**{k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
                              "dynamics": {**(cfg.dynamics or {}), "sequences": seqs}})
    records = harness.run_dynamics(cfg)
    for d in records:
        print(f"{d['source']:>20} {d['sequence']}: estimate={d['estimate']:.6g} truth={d['truth']:.6g} "
              f"abs_error={d['abs_error']:.3e}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "dynamics.jsonl", "w") as fh:
            for d in records:
                fh.write(json.dumps(harness._json_safe(d), sort_keys=True) + "\n")
    return 0


def cmd_scenarios(args) -> int:
    for name, path in bundled_scenarios().items():
        print(f"{name}\t{path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pomdp-ope", description="Off-policy evaluation experiments on POMDPs")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True, jobs=False):
        p.add_argument("--config", required=True, help="config JSON path or bundled scenario name")
        p.add_argument("--seed-override", type=int, default=None, help="replace the config's seed list")
        if out:
            p.add_argument("--out", default=None, help="output directory")
        if jobs:
            p.add_argument("--jobs", type=int, default=None, help="worker processes (default: $POMDP_OPE_JOBS or 1)")

    p = sub.add_parser("run", help="diagnostics + sweep + report")
    common(p, jobs=True)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("sweep", help="n-grid x seed-grid estimator sweep")
    common(p, jobs=True)
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("simulate", help="generate an offline dataset file")
    common(p)
    p.add_argument("--n", type=int, default=None, help="number of tuples (default: first n_grid entry)")
    p.add_argument("--n-init", type=int, default=None, help="number of initial samples")
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("estimate", help="run the configured estimators on a dataset file")
    common(p)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_estimate)
    p = sub.add_parser("diagnose", help="rank conditions and condition numbers")
    common(p)
    p.set_defaults(func=cmd_diagnose)
    p = sub.add_parser("dynamics", help="observation-sequence probabilities")
    common(p)
    p.add_argument("--sequences", default=None, help="JSON list of sequences of [o, a] pairs")
    p.set_defaults(func=cmd_dynamics)
    p = sub.add_parser("scenarios", help="list bundled scenarios")
    p.set_defaults(func=cmd_scenarios)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except OPEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON argument ({exc.msg})", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
