"""Command-line entry points: meta-train, adapt, eval, experiment, compare."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .agent import load_policy, save_policy, select_action, q_values
from .errors import ScenarioError
from .harness import (
    ExperimentConfig,
    MetaConfig,
    compare_methods,
    load_scenario,
    normalize_method,
    read_results_csv,
    run_case,
    run_experiment,
    train_shared,
    write_comparison,
    write_results,
)
from .meta import TaskPool, meta_test
from .sim import TransitionCounter


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="experiment config JSON")
    parser.add_argument("--seed", type=_parse_seeds, help="seed or comma-separated seeds")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--rounds", type=int, help="override meta training rounds")
    parser.add_argument("--method", type=str, help="method name")


def _load_config(args, default_method: str | None = None) -> ExperimentConfig:
    if args.config is None:
        raise ScenarioError("--config is required")
    cfg = ExperimentConfig.from_file(args.config)
    data = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if args.method:
        data.pop("methods", None)
        data["method"] = args.method
    elif default_method and "method" not in data and "methods" not in data:
        data["method"] = default_method
    if args.seed:
        data["seeds"] = args.seed
    if args.rounds:
        data["rounds"] = args.rounds
    if args.out:
        data["out"] = str(args.out)
    return ExperimentConfig.from_dict(data, origin=str(args.config))


def cmd_meta_train(args) -> int:
    cfg = _load_config(args)
    method = normalize_method(args.method or cfg.methods[0])
    pool = TaskPool(tuple(load_scenario(p) for p in cfg.pool_paths))
    out_dir = Path(cfg.out_dir or "out")
    out_dir.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        shared = train_shared(method, pool, cfg, seed)
        path = out_dir / f"policy_{method}_seed{seed}.npz"
        save_policy(path, shared.theta)
        print(f"seed {seed}: trained {method} for {shared.rounds} rounds "
              f"({shared.counter.count} real transitions) -> {path}")
    return 0


def cmd_adapt(args) -> int:
    if not args.checkpoint or not args.scenario:
        raise ScenarioError("adapt needs --checkpoint and --scenario")
    meta_cfg = MetaConfig.from_file(args.meta_config) if args.meta_config else MetaConfig()
    theta = load_policy(args.checkpoint)
    scenario = load_scenario(args.scenario)
    seed = (args.seed or [0])[0]
    counter = TransitionCounter()
    outcome = meta_test(theta, scenario, meta_cfg, seed, counter=counter)
    print(f"adaptation travel time: {outcome.adapt_travel_time_s:.2f} s")
    print(f"evaluation travel time: {outcome.eval_travel_time_s:.2f} s")
    print(f"real transitions used: {counter.count}")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        path = args.out / f"adapted_{scenario.name}_seed{seed}.npz"
        save_policy(path, outcome.adapted)
        print(f"adapted policy -> {path}")
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint or not args.scenario:
        raise ScenarioError("eval needs --checkpoint and --scenario")
    theta = load_policy(args.checkpoint)
    scenario = load_scenario(args.scenario)
    seed = (args.seed or [0])[0]
    epsilon = args.epsilon
    rng = np.random.default_rng([31, seed])
    policy_rng = np.random.default_rng([32, seed])
    from .sim import EpisodeRunner, average_travel_time

    runner = EpisodeRunner(scenario, rng=rng)
    while not runner.done:
        obs = runner.observation()
        runner.apply(select_action(q_values(theta, obs, scenario.phase_table), epsilon, policy_rng))
    print(f"evaluation travel time: {average_travel_time(runner.stats()):.2f} s")
    return 0


def cmd_experiment(args) -> int:
    cfg = _load_config(args)
    rows, curves = run_experiment(cfg)
    out_dir = Path(cfg.out_dir or "out")
    paths = write_results(out_dir, rows, curves)
    failed = sum(1 for r in rows if r.avg_travel_time_s != r.avg_travel_time_s)
    print(f"{len(rows)} result rows ({failed} failed) -> {paths['results']}")
    return 0 if failed == 0 else 1


def cmd_compare(args) -> int:
    if not args.results:
        raise ScenarioError("compare needs at least one results.csv path")
    rows = []
    for path in args.results:
        rows.extend(read_results_csv(path))
    text, comparison = compare_methods(rows, candidate=args.candidate)
    print(text)
    if args.out:
        path = write_comparison(args.out, comparison)
        print(f"comparison table -> {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modellight",
        description="Model-based meta-RL lab for single-intersection signal control",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("meta-train", help="meta-train a policy initialization")
    _add_common(p)
    p.set_defaults(fn=cmd_meta_train)

    p = sub.add_parser("adapt", help="adapt a trained initialization to one scenario")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, help="policy checkpoint (.npz)")
    p.add_argument("--scenario", type=Path, help="scenario JSON")
    p.add_argument("--meta-config", type=Path, help="MetaConfig JSON (defaults otherwise)")
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("eval", help="evaluate a policy checkpoint, no adaptation")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, help="policy checkpoint (.npz)")
    p.add_argument("--scenario", type=Path, help="scenario JSON")
    p.add_argument("--epsilon", type=float, default=0.2, help="evaluation exploration rate")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("experiment", help="run a full experiment config")
    _add_common(p)
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("compare", help="compare methods across results files")
    _add_common(p)
    p.add_argument("results", nargs="*", type=Path, help="results.csv files")
    p.add_argument("--candidate", default="ModelLight", help="method to compare against the rest")
    p.set_defaults(fn=cmd_compare)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
