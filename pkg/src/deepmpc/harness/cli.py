"""Command line entry point: ``deepmpc {run,bench,verify}``."""

from __future__ import annotations

import argparse
import sys
import warnings
from dataclasses import replace

from deepmpc.errors import ConfigurationError, DeepMpcError
from deepmpc.harness import outputs, verify
from deepmpc.harness.config import MODES, ExperimentConfig, load_config, parse_bool
from deepmpc.harness.runner import run_agent, run_experiment


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults reproduce the benchmark)")
    common.add_argument("--seed", type=int, help="disturbance and initialisation seed")
    common.add_argument("--out-dir", help="directory for CSV and SVG outputs")
    common.add_argument("--mode", choices=MODES, help="controller for `run`")
    common.add_argument("--deterministic-training", choices=("on", "off"),
                        help="train inline (on) or in a background thread (off)")
    p = argparse.ArgumentParser(prog="deepmpc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="simulate every agent with one controller")
    b = sub.add_parser("bench", parents=[common],
                       help="all controllers over the seed set, with the MSE table")
    b.add_argument("--seeds", type=int, help="use the first N seeds of the config")
    v = sub.add_parser("verify", parents=[common], help="guarantee and property checks")
    v.add_argument("--quick", action="store_true", help="single benchmark seed, fewer samples")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out_dir:
        changes["out_dir"] = args.out_dir
    if args.mode:
        changes["controller"] = args.mode
    if args.deterministic_training:
        changes["deterministic_training"] = parse_bool(args.deterministic_training)
    cfg = replace(cfg, **changes)
    if cfg.theta * (cfg.layers[-1] + 1) >= 1 and cfg.uncertainty != "structured":
        warnings.warn(f"theta*sigma^2 = {cfg.theta * (cfg.layers[-1] + 1):.2f} >= 1: the "
                      "mean-square adaptation bound is not guaranteed", RuntimeWarning)
    return cfg


def _cmd_run(cfg: ExperimentConfig) -> int:
    recs = [run_agent(cfg, a, agent_index=i) for i, a in enumerate(cfg.agents)]
    for p in outputs.emit_outputs(recs, None, cfg.out_dir, plots=cfg.plots):
        print(f"wrote {p}")
    ok = all(r.passed(cfg.qp_tol) for r in recs)
    for r in recs:
        print(f"agent {r.agent + 1} ({r.controller}): constraints "
              f"{'ok' if r.constraints_ok else 'VIOLATED'}")
    return 0 if ok else 1


def _cmd_bench(cfg: ExperimentConfig, n_seeds) -> int:
    seeds = cfg.seeds[:n_seeds] if n_seeds else cfg.seeds
    report = run_experiment(cfg, seeds=seeds)
    recs = list(report.records.values())
    outputs.emit_outputs(recs, report, cfg.out_dir, plots=cfg.plots)
    print(f"{'controller':<10}{'agent':>6}{'state':>7}{'median MSE':>14}")
    for row in report.table():
        print(f"{row['controller']:<10}{row['agent']:>6}{row['state']:>7}"
              f"{row['median_mse']:>14.6f}")
    for (name, a), r in report.ratios().items():
        print(f"agent {a + 1} {name}: " + ", ".join(f"{v:.4f}" for v in r))
    print(f"outputs in {cfg.out_dir}")
    return 0 if all(r.passed(cfg.qp_tol) for r in recs) else 1


def _cmd_verify(cfg: ExperimentConfig, quick: bool) -> int:
    results = verify.run_all(cfg, quick=quick)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _config(args)
        if args.command == "run":
            return _cmd_run(cfg)
        if args.command == "bench":
            return _cmd_bench(cfg, args.seeds)
        return _cmd_verify(cfg, args.quick)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DeepMpcError as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
