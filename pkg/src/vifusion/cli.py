"""Command-line surface.

Subcommands: simulate (spec -> dataset directory), run (config -> run
artifacts), eval (estimate + ground truth -> metrics), compare (metrics ->
table). Exit codes: 0 success, 1 configuration error, 2 the run finished
but degraded (solver aborts or skipped fusions), 3 evaluation failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, default_config, load_config
from .evaluate import (EvaluationError, Trajectory, ate_rmse, compare_runs,
                       horn_align, write_comparison)
from .pipeline import run_pipeline, simulate_to_dir

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DEGRADED = 2
EXIT_EVAL = 3


def _load(args) -> RunConfig:
    overrides = {
        "mode": getattr(args, "mode", None),
        "seed": getattr(args, "seed", None),
        "out_dir": getattr(args, "out", None),
        "dataset": getattr(args, "dataset", None),
    }
    if getattr(args, "single_thread", False):
        overrides["single_thread"] = True
    if args.config:
        return load_config(args.config, overrides)
    cfg = default_config()
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    cfg.__post_init__()
    return cfg


def _cmd_simulate(args) -> int:
    cfg = _load(args)
    out = simulate_to_dir(cfg, args.out or cfg.out_dir)
    print(f"dataset written to {out}")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = _load(args)
    metrics = run_pipeline(cfg)
    metrics.pop("_deterministic", None)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    if metrics.get("degradations", 0):
        return EXIT_DEGRADED
    return EXIT_OK


def _cmd_eval(args) -> int:
    try:
        est = Trajectory.from_csv(args.est)
        ref = Trajectory.from_csv(args.gt)
        _, _, aligned = horn_align(est, ref)
        metrics = {"ate_rmse": ate_rmse(aligned, ref),
                   "pairs": int(est.t.size)}
    except (EvaluationError, ValueError, OSError) as err:
        print(f"evaluation failed: {err}", file=sys.stderr)
        return EXIT_EVAL
    text = json.dumps(metrics, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


def _cmd_compare(args) -> int:
    metrics = []
    for p in args.metrics:
        try:
            with open(p) as fh:
                metrics.append(json.load(fh))
        except (OSError, json.JSONDecodeError) as err:
            print(f"cannot read {p}: {err}", file=sys.stderr)
            return EXIT_EVAL
    rows, ok = compare_runs(metrics)
    for row in rows:
        print(",".join(row))
    if args.out:
        write_comparison(rows, args.out)
    return EXIT_OK if ok else EXIT_EVAL


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vifusion",
        description="visual-inertial estimation benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    p_sim.add_argument("--config", help="YAML run configuration")
    p_sim.add_argument("--seed", type=int)
    p_sim.add_argument("--out", help="dataset directory")
    p_sim.set_defaults(func=_cmd_simulate)

    p_run = sub.add_parser("run", help="run the estimation pipeline")
    p_run.add_argument("--config", help="YAML run configuration")
    p_run.add_argument("--mode", choices=["full", "ekf-only"])
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--out", help="artifact directory")
    p_run.add_argument("--dataset", help="read this dataset directory "
                       "instead of simulating")
    p_run.add_argument("--single-thread", action="store_true",
                       dest="single_thread",
                       help="solve the back-end synchronously "
                       "(deterministic)")
    p_run.set_defaults(func=_cmd_run)

    p_eval = sub.add_parser("eval", help="align and score a trajectory")
    p_eval.add_argument("--est", required=True)
    p_eval.add_argument("--gt", required=True)
    p_eval.add_argument("--out")
    p_eval.set_defaults(func=_cmd_eval)

    p_cmp = sub.add_parser("compare", help="tabulate run metrics")
    p_cmp.add_argument("metrics", nargs="+")
    p_cmp.add_argument("--out")
    p_cmp.set_defaults(func=_cmd_compare)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
