"""
Command Line Interface
simulate, train, sample, evaluate, benchmark, report and schema subcommands

Exit codes:
    0 success, 1 contract violation, 2 usage, 3 unknown task or method,
    4 malformed config, 5 archive version mismatch, 6 archive checksum mismatch
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import pandas as pd

from archive import SimulationArchive, read_archive, write_archive
from autodiff import set_precision
from config import ExperimentConfig, build_config, config_schema, get_settings, load_config, preset_config
from data import SimulationSet
from errors import (
    ArchiveChecksumError, ArchiveVersionError, ConfigError, FnopeError, UnknownNameError,
)
from estimators import get_estimator, list_methods, load_estimator
from harness import (
    SeedOutcome, data_dir, draw_posteriors, evaluate, failures_frame, fixed_grid_test_set, load_or_simulate,
    metrics_frame, read_metrics, report, run_dir, run_pipeline, write_metrics,
)
from simulators import get_task, list_tasks
from training import save_history

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_UNKNOWN_NAME = 3
EXIT_CONFIG = 4
EXIT_ARCHIVE_VERSION = 5
EXIT_ARCHIVE_CHECKSUM = 6


# ===================
# Config Resolution
# ===================

def _csv_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def resolve_config(args: argparse.Namespace, method: Optional[str] = None, budget: Optional[int] = None) -> ExperimentConfig:
    """
    Experiment config from --config or the presets, with command line overrides applied

    Raises:
        ConfigError: neither --config nor --task given, or the result fails validation
        UnknownNameError: task or method not registered
    """
    if args.config:
        cfg = load_config(args.config)
    elif getattr(args, "task", None):
        cfg = preset_config(args.task, method or getattr(args, "method", None) or "fnope", args.scale)
    else:
        raise ConfigError("either --config or --task is required")

    updates = {}
    if getattr(args, "task", None) and args.config and args.task != cfg.task:
        updates["task"] = args.task
    if method is not None:
        updates["method"] = method
    elif getattr(args, "method", None) and args.config:
        updates["method"] = args.method
    if budget is not None:
        updates["budget"] = budget
    elif getattr(args, "budget", None) is not None:
        updates["budget"] = args.budget
    if args.seed is not None:
        updates["seeds"] = [args.seed]
    if args.out:
        updates["output_dir"] = args.out
    if updates:
        cfg = build_config({**cfg.model_dump(), **updates})

    get_task(cfg.task, **cfg.task_options)
    if cfg.method not in list_methods():
        raise UnknownNameError("method", cfg.method, list_methods())
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir)


def _test_set(cfg: ExperimentConfig, seed: int, fixed: bool) -> SimulationSet:
    task = get_task(cfg.task, **cfg.task_options)
    base = data_dir(cfg, _out_dir(cfg))
    if fixed:
        return fixed_grid_test_set(task, cfg.evaluation.n_test, seed, base / f"test_grid_seed{seed}")
    return load_or_simulate(task, cfg.evaluation.n_test, (seed, 2), base / f"test_seed{seed}", "test", seed)


# ===================
# Subcommands
# ===================

def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    task = get_task(cfg.task, **cfg.task_options)
    base = data_dir(cfg, _out_dir(cfg))
    for seed in cfg.seeds:
        if args.kind == "test":
            path = base / f"test_seed{seed}"
            load_or_simulate(task, cfg.evaluation.n_test, (seed, 2), path, "test", seed)
        else:
            path = base / "simulations" / f"budget{cfg.budget}_seed{seed}"
            load_or_simulate(task, cfg.budget, (seed, 0), path, "simulations", seed)
        print(path)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    task = get_task(cfg.task, **cfg.task_options)
    base = data_dir(cfg, _out_dir(cfg))
    for seed in cfg.seeds:
        data = load_or_simulate(task, cfg.budget, (seed, 0), base / "simulations" / f"budget{cfg.budget}_seed{seed}",
                                "simulations", seed)
        estimator = get_estimator(cfg, task, seed)
        result = estimator.fit(data)
        target = run_dir(cfg, _out_dir(cfg), seed)
        estimator.save(str(target))
        save_history(result.history, str(target / "history.csv"))
        print(target)
    return EXIT_OK


def cmd_sample(args: argparse.Namespace) -> int:
    """Posterior draws for every record of an observation archive"""
    estimator = load_estimator(args.run)
    observations = SimulationSet(**read_archive(args.observations).arrays)
    seed = args.seed if args.seed is not None else estimator.seed
    n_samples = args.n_samples or estimator.cfg.evaluation.n_post
    theta, eta = draw_posteriors(estimator, observations, n_samples, seed)
    target = Path(args.out) if args.out else Path(args.run) / "samples"
    write_archive(str(target), SimulationArchive(
        {"theta": theta, "eta": eta, "pos_theta": observations.pos_theta},
        kind="samples", task=estimator.cfg.task, budget=estimator.cfg.budget, seed=seed,
    ))
    print(target)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    """Metrics for a trained estimator directory against the held-out test set"""
    estimator = load_estimator(args.run)
    cfg = estimator.cfg
    if args.out:
        cfg = build_config({**cfg.model_dump(), "output_dir": args.out})
    seed = args.seed if args.seed is not None else estimator.seed
    test = _test_set(cfg, seed, estimator.fixed_discretization)
    theta, eta = draw_posteriors(estimator, test, cfg.evaluation.n_post, seed)
    outcome = SeedOutcome(seed, evaluate(cfg, estimator, estimator.task, test, theta, eta, seed))
    frame = metrics_frame(cfg, [outcome])
    write_metrics(frame, Path(args.run) / "metrics.csv")
    print(frame.to_string(index=False))
    return EXIT_OK


def cmd_benchmark(args: argparse.Namespace) -> int:
    """Full pipeline over every (method, budget) pair; failed seeds are listed in failures.csv"""
    methods = _csv_list(args.methods) if args.methods else [None]
    budgets = [int(b) for b in _csv_list(args.budgets)] if args.budgets else [None]
    frames, failures = [], []
    out = None
    for method in methods:
        for budget in budgets:
            cfg = resolve_config(args, method=method, budget=budget)
            out = _out_dir(cfg)
            frame, outcomes = run_pipeline(cfg, str(out))
            frames.append(frame)
            failures.append(failures_frame(cfg, outcomes))

    metrics = pd.concat(frames, ignore_index=True)
    write_metrics(metrics, out / "metrics.csv")
    failed = pd.concat(failures, ignore_index=True)
    if not failed.empty:
        failed.to_csv(out / "failures.csv", index=False)
        logger.warning(f"{len(failed)} seed runs failed, see {out / 'failures.csv'}")
    summary = report(metrics)
    summary.to_csv(out / "report.csv", index=False, float_format="%.17g")
    print(summary.to_string(index=False))
    return EXIT_OK if failed.empty else EXIT_FAILURE


def cmd_report(args: argparse.Namespace) -> int:
    frames = [read_metrics(path) for path in args.metrics]
    summary = report(pd.concat(frames, ignore_index=True))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        summary.to_csv(args.out, index=False, float_format="%.17g")
    print(summary.to_string(index=False))
    return EXIT_OK


def cmd_schema(args: argparse.Namespace) -> int:
    text = json.dumps(config_schema(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


# ===================
# Parser
# ===================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fnope", description="Functional flow-matching posterior estimation benchmark")
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    parser.add_argument("--precision", choices=["float64", "float32"], help="floating point profile")
    parser.add_argument("--out", help="output directory (or file for report/schema/sample)")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_flags(p: argparse.ArgumentParser, method: bool = True) -> None:
        p.add_argument("--task", help=f"one of {', '.join(list_tasks())}")
        if method:
            p.add_argument("--method", help=f"one of {', '.join(list_methods())}")
        p.add_argument("--budget", type=int, help="number of training simulations")
        p.add_argument("--scale", choices=["desk", "full"], default="desk", help="task size preset")

    p = sub.add_parser("simulate", help="write a simulation or test archive")
    experiment_flags(p, method=False)
    p.add_argument("--kind", choices=["simulations", "test"], default="simulations")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("train", help="train an estimator and save it")
    experiment_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("sample", help="draw posterior samples from a trained estimator")
    p.add_argument("--run", required=True, help="estimator directory written by train")
    p.add_argument("--observations", required=True, help="archive holding observations and their positions")
    p.add_argument("--n-samples", type=int, dest="n_samples")
    p.set_defaults(handler=cmd_sample)

    p = sub.add_parser("evaluate", help="compute metrics for a trained estimator")
    p.add_argument("--run", required=True, help="estimator directory written by train")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("benchmark", help="simulate, train, sample and evaluate across methods and budgets")
    p.add_argument("--task", help=f"one of {', '.join(list_tasks())}")
    p.add_argument("--methods", help="comma separated method names")
    p.add_argument("--budgets", help="comma separated simulation budgets")
    p.add_argument("--scale", choices=["desk", "full"], default="desk")
    p.set_defaults(handler=cmd_benchmark)

    p = sub.add_parser("report", help="aggregate metrics CSV files into mean and stderr per group")
    p.add_argument("metrics", nargs="+", help="metrics CSV files")
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("schema", help="print the experiment config JSON schema")
    p.set_defaults(handler=cmd_schema)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse argv, run the subcommand and map failures to exit codes"""
    settings = get_settings()
    logging.basicConfig(level=settings.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    try:
        set_precision(args.precision or settings.precision)
        return args.handler(args)
    except UnknownNameError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_UNKNOWN_NAME
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ArchiveVersionError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ARCHIVE_VERSION
    except ArchiveChecksumError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ARCHIVE_CHECKSUM
    except FnopeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as e:
        logger.error(f"Unexpected failure: {e}", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE
