"""Command line: ``ftrl-mdp run|diagnose|fit``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .diagnostics import lemma_suite
from .harness import (
    ConfigError,
    build_env,
    build_mdp,
    expand_algo,
    load_config,
    read_trace,
    regret_fit,
    run_experiment,
)
from .mdp import DomainError, MdpError
from .regularizer import RegularizerParams
from .solver import SolveConfig

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    results = run_experiment(cfg)
    for r in results:
        if r["ok"]:
            print(f"seed {r['seed']}: final regret {r['final_regret']:.6g} ({r['wall_time_s']:.1f}s)")
        else:
            print(f"seed {r['seed']}: FAILED {r['error']}", file=sys.stderr)
    print(f"outputs in {cfg.output}")
    return EXIT_OK if all(r["ok"] for r in results) else EXIT_FAILED


def cmd_diagnose(args) -> int:
    cfg = load_config(args.config)
    mdp = build_mdp(cfg.mdp, cfg.base_dir)
    algo = expand_algo(cfg.algo, mdp)
    if algo["algorithm"] != "hybrid":
        raise ConfigError("diagnose needs the hybrid algorithm")
    d = cfg.diagnose
    seed = int(d.get("seed", cfg.seeds[0]))
    reports = lemma_suite(
        mdp, build_env(cfg.env, mdp, seed), RegularizerParams(algo["alpha"], algo["beta"], algo["gamma"]),
        episodes=int(d.get("episodes", 500)), instances=int(d.get("instances", 100)), seed=seed,
        config=SolveConfig(algo["tolerance"], algo["max_iterations"]),
    )
    table = {name: rep.as_dict() for name, rep in reports.items()}
    text = json.dumps(table, indent=2, sort_keys=True)
    print(text)
    cfg.output.mkdir(parents=True, exist_ok=True)
    (cfg.output / "diagnostics.json").write_text(text + "\n")
    return EXIT_OK if all(r.passed for r in reports.values()) else EXIT_FAILED


def cmd_fit(args) -> int:
    trace = read_trace(args.trace)
    column = args.column or ("running_regret" if "running_regret" in trace else "regret")
    if column not in trace:
        raise ConfigError(f"trace has no column {column!r}")
    fit = regret_fit(trace["t"], trace[column]).as_dict()
    fit["column"] = column
    print(json.dumps(fit, indent=2, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ftrl-mdp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run an experiment config over all its seeds")
    p.add_argument("config", type=Path)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("diagnose", help="run the lemma checks; prints a JSON table")
    p.add_argument("config", type=Path)
    p.set_defaults(func=cmd_diagnose)
    p = sub.add_parser("fit", help="log vs sqrt fit of a trace.csv regret column")
    p.add_argument("trace", type=Path)
    p.add_argument("--column", default=None, help="default: running_regret if present, else regret")
    p.set_defaults(func=cmd_fit)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, MdpError, DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
