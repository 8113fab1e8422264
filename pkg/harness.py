"""
Benchmark Harness
simulate -> train -> sample -> evaluate pipelines per seed, metrics CSV and report aggregation

Output layout under the experiment output directory:
    {task}/data-{options}/simulations/budget{K}_seed{s}/   training archive (reused when present)
    {task}/data-{options}/test_seed{s}/                     held-out observations
    {task}/{method}/budget{K}/seed{s}/                      model, scalers, samples, history.csv, metrics.csv
"""

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from archive import SimulationArchive, archive_exists, read_archive, write_archive
from config import ExperimentConfig, get_settings
from data import SimulationSet
from errors import DomainError
from estimators import Estimator, FnopeEstimator, get_estimator
from metrics import (
    logprob_per_point, predictive_mse, rank_uniformity_pvalue, sbc_eod, sbc_eod_lower_bound, sbc_ranks,
    subset_indices, swd,
)
from simulators import LinearGaussianTask, SirdTask, Task, get_task, lg_analytic_posterior
from training import save_history

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["task", "method", "budget", "seed", "metric", "value"]
REPORT_COLUMNS = ["task", "method", "budget", "metric", "mean", "stderr", "n_seeds"]

# SBC marginals are drawn with this seed so every method and seed sees the same points
SBC_SUBSET_SEED = 2025


class Stage(str, Enum):
    """Pipeline stages, recorded with per-seed failures"""
    SIMULATE = "simulate"
    TRAIN = "train"
    SAMPLE = "sample"
    EVALUATE = "evaluate"


@dataclass
class SeedOutcome:
    seed: int
    metrics: Dict[str, float] = field(default_factory=dict)
    failed_stage: Optional[Stage] = None
    error: Optional[str] = None


# ===================
# Paths and Archives
# ===================

def _options_key(cfg: ExperimentConfig) -> str:
    text = json.dumps(cfg.task_options, sort_keys=True, default=str)
    return hashlib.sha1(text.encode()).hexdigest()[:10]


def data_dir(cfg: ExperimentConfig, out_dir: Path) -> Path:
    return out_dir / cfg.task / f"data-{_options_key(cfg)}"


def run_dir(cfg: ExperimentConfig, out_dir: Path, seed: int) -> Path:
    return out_dir / cfg.task / cfg.method / f"budget{cfg.budget}" / f"seed{seed}"


def simulation_archive(data: SimulationSet, task: Task, kind: str, budget: int, seed: int) -> SimulationArchive:
    return SimulationArchive(data.arrays(), kind=kind, task=task.name, budget=budget, seed=seed,
                             meta={"schema": task.manifest()})


def load_or_simulate(task: Task, n: int, rng_key: Tuple[int, ...], path: Path, kind: str, seed: int) -> SimulationSet:
    """Read the archive at path when it exists, else simulate and write it; existing archives are never modified"""
    if archive_exists(str(path)):
        logger.info(f"Reusing {kind} archive at {path}")
        return SimulationSet(**read_archive(str(path)).arrays)
    rng = np.random.default_rng(list(rng_key))
    data = task.test_set(n, rng) if kind == "test" else task.simulate_set(n, rng)
    write_archive(str(path), simulation_archive(data, task, kind, n, seed))
    return data


def fixed_grid_test_set(task: Task, n: int, seed: int, path: Path) -> SimulationSet:
    """Held-out observations on the dense task grid for fixed-discretization estimators"""
    if archive_exists(str(path)):
        return SimulationSet(**read_archive(str(path)).arrays)
    data = task.simulate_set(n, np.random.default_rng([seed, 2, 1]))
    write_archive(str(path), simulation_archive(data, task, "test", n, seed))
    return data


# ===================
# Evaluation
# ===================

def _sbc_dims(n_points: int, n_dims: int) -> np.ndarray:
    return subset_indices(n_points, n_dims, np.random.default_rng(SBC_SUBSET_SEED))


def _reduce(theta: np.ndarray, eta: np.ndarray, dims: np.ndarray) -> np.ndarray:
    """(S, N, C) and (S, E) -> (S, d) SBC marginals: first channel at the subset points, then eta"""
    return np.concatenate([theta[:, dims, 0], eta.reshape(len(theta), -1)], axis=1)


def draw_posteriors(
    estimator: Estimator, test: SimulationSet, n_post: int, seed: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior draws per test record, each record on its own stream"""
    thetas, etas = [], []
    for j in range(len(test)):
        rng = np.random.default_rng([seed, 3, j])
        theta, eta = estimator.sample(test.x[j], test.pos_x[j], test.pos_theta[j], n_post, rng)
        thetas.append(theta)
        etas.append(eta.reshape(n_post, -1))
    return np.stack(thetas), np.stack(etas)


def evaluate(
    cfg: ExperimentConfig, estimator: Estimator, task: Task, test: SimulationSet,
    theta_post: np.ndarray, eta_post: np.ndarray, seed: int,
) -> Dict[str, float]:
    """All metrics that apply to the task and estimator"""
    ev = cfg.evaluation
    n_test, n_post = theta_post.shape[:2]
    metrics: Dict[str, float] = {}

    dims = _sbc_dims(test.theta.shape[1], ev.sbc_points)
    truth = _reduce(test.theta, test.eta, dims)
    table = sbc_ranks(lambda j: _reduce(theta_post[j], eta_post[j], dims), truth, n_post,
                      np.random.default_rng([seed, 4]))
    metrics["sbc_eod"] = sbc_eod(table)
    metrics["sbc_eod_lower_bound"] = sbc_eod_lower_bound(table.n_test, table.n_dims, n_post,
                                                         rng=np.random.default_rng([seed, 5]))
    metrics["sbc_rank_pvalue"] = rank_uniformity_pvalue(table)

    if isinstance(task, LinearGaussianTask):
        rng = np.random.default_rng([seed, 6])
        posterior_swd, prior_swd = [], []
        for j in range(n_test):
            reference = lg_analytic_posterior(test.x[j][:, 0], task).sample(n_post, rng)[..., 0]
            prior, _ = task.sample_prior(n_post, rng)
            posterior_swd.append(swd(theta_post[j][..., 0], reference, ev.n_projections, rng))
            prior_swd.append(swd(prior[..., 0], reference, ev.n_projections, rng))
        metrics["swd"] = float(np.mean(posterior_swd))
        metrics["swd_prior"] = float(np.mean(prior_swd))

    n_pred = min(ev.n_predictive, n_post)
    sim_rng = np.random.default_rng([seed, 7])
    prior_rng = np.random.default_rng([seed, 8])

    def simulate_draws(j: int, draws: Tuple[np.ndarray, np.ndarray]) -> np.ndarray:
        return task.simulate(draws[0], draws[1], sim_rng, test.pos_theta[j], test.pos_x[j])

    posterior_draws = [(theta_post[j, :n_pred], eta_post[j, :n_pred]) for j in range(n_test)]
    prior_draws = [task.sample_prior(n_pred, prior_rng, test.pos_theta[j]) for j in range(n_test)]
    post = predictive_mse(posterior_draws, simulate_draws, list(test.x))
    prior = predictive_mse(prior_draws, simulate_draws, list(test.x))
    metrics.update({"predictive_mse": post.mse, "predictive_failures": float(post.n_failed),
                    "prior_predictive_mse": prior.mse})

    if isinstance(task, SirdTask):
        std = task.eta_prior_std()
        within = np.all(np.abs(eta_post.mean(axis=1) - test.eta) <= 2.0 * std[None], axis=1)
        metrics["eta_within_2sd"] = float(np.mean(within))
        drift = 0.0
        for j, (theta, eta) in enumerate(posterior_draws):
            states = task.trajectories(theta, eta, test.pos_theta[j], test.pos_x[j])
            drift = max(drift, float(np.max(np.abs(states.sum(axis=-1) - sum(task.initial_state)))))
        metrics["conservation_drift"] = drift

    if ev.logprob and estimator.supports_log_prob:
        n_points = [test.theta.shape[1]] * n_test
        metrics["logprob_per_point"] = logprob_per_point(
            lambda j: estimator.log_prob(test.theta[j], test.eta[j], test.x[j], test.pos_x[j], test.pos_theta[j]),
            n_points,
        )
        if isinstance(estimator, FnopeEstimator):
            metrics["logprob_per_point_base"] = logprob_per_point(
                lambda j: estimator.base_log_prob(test.theta[j], test.eta[j], test.pos_theta[j]), n_points,
            )
    return metrics


# ===================
# Pipeline
# ===================

def run_seed(cfg: ExperimentConfig, seed: int, out_dir: str) -> SeedOutcome:
    """One seed of the pipeline; failures are caught and reported with their stage"""
    out = Path(out_dir)
    outcome = SeedOutcome(seed)
    stage = Stage.SIMULATE
    try:
        task = get_task(cfg.task, **cfg.task_options)
        base = data_dir(cfg, out)
        train_set = load_or_simulate(task, cfg.budget, (seed, 0), base / "simulations" / f"budget{cfg.budget}_seed{seed}",
                                     "simulations", seed)
        estimator = get_estimator(cfg, task, seed)
        if estimator.fixed_discretization:
            test = fixed_grid_test_set(task, cfg.evaluation.n_test, seed, base / f"test_grid_seed{seed}")
        else:
            test = load_or_simulate(task, cfg.evaluation.n_test, (seed, 2), base / f"test_seed{seed}", "test", seed)

        stage = Stage.TRAIN
        result = estimator.fit(train_set)
        target = run_dir(cfg, out, seed)
        estimator.save(str(target))
        save_history(result.history, str(target / "history.csv"))

        stage = Stage.SAMPLE
        theta_post, eta_post = draw_posteriors(estimator, test, cfg.evaluation.n_post, seed)
        write_archive(str(target / "samples"), SimulationArchive(
            {"theta": theta_post, "eta": eta_post, "pos_theta": test.pos_theta},
            kind="samples", task=cfg.task, budget=cfg.budget, seed=seed,
            meta={"sbc_dims": _sbc_dims(test.theta.shape[1], cfg.evaluation.sbc_points).tolist()},
        ))

        stage = Stage.EVALUATE
        outcome.metrics = evaluate(cfg, estimator, task, test, theta_post, eta_post, seed)
        metrics_frame(cfg, [outcome]).to_csv(target / "metrics.csv", index=False, float_format="%.17g")
        logger.info(f"Seed {seed} of {cfg.task}/{cfg.method}/budget{cfg.budget} finished")
    except Exception as e:
        logger.error(f"Seed {seed} failed during {stage.value}: {e}", exc_info=True)
        outcome.failed_stage = stage
        outcome.error = f"{type(e).__name__}: {e}"
    return outcome


def metrics_frame(cfg: ExperimentConfig, outcomes: List[SeedOutcome]) -> pd.DataFrame:
    rows = [
        {"task": cfg.task, "method": cfg.method, "budget": cfg.budget, "seed": o.seed, "metric": name, "value": value}
        for o in outcomes for name, value in sorted(o.metrics.items())
    ]
    return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def run_pipeline(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> Tuple[pd.DataFrame, List[SeedOutcome]]:
    """
    Run every seed of one (task, method, budget) experiment

    Seeds run in a process pool when Settings.workers > 1; each seed writes only
    to its own directories.

    Returns:
        (metrics rows, per-seed outcomes including failures)
    """
    out = str(out_dir or cfg.output_dir)
    workers = get_settings().workers
    if workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(cfg.seeds))) as pool:
            outcomes = list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds, [out] * len(cfg.seeds)))
    else:
        outcomes = [run_seed(cfg, seed, out) for seed in cfg.seeds]
    failed = [o for o in outcomes if o.error]
    if failed:
        logger.warning(f"{len(failed)} of {len(outcomes)} seeds failed for {cfg.task}/{cfg.method}")
    return metrics_frame(cfg, outcomes), outcomes


def failures_frame(cfg: ExperimentConfig, outcomes: List[SeedOutcome]) -> pd.DataFrame:
    rows = [{"task": cfg.task, "method": cfg.method, "budget": cfg.budget, "seed": o.seed,
             "stage": o.failed_stage.value, "error": o.error} for o in outcomes if o.error]
    return pd.DataFrame(rows, columns=["task", "method", "budget", "seed", "stage", "error"])


# ===================
# Reporting
# ===================

def report(metrics: pd.DataFrame) -> pd.DataFrame:
    """Mean and standard error across seeds; stderr is empty for a single seed"""
    if metrics.empty:
        return pd.DataFrame(columns=REPORT_COLUMNS)
    grouped = metrics.groupby(["task", "method", "budget", "metric"], sort=True)["value"]
    summary = grouped.agg(["mean", "std", "count"]).reset_index()
    summary["stderr"] = summary["std"] / np.sqrt(summary["count"])
    summary.loc[summary["count"] < 2, "stderr"] = np.nan
    summary = summary.rename(columns={"count": "n_seeds"})
    return summary[REPORT_COLUMNS]


def write_metrics(metrics: pd.DataFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    metrics.to_csv(path, index=False, float_format="%.17g")


def read_metrics(path: str) -> pd.DataFrame:
    frame = pd.read_csv(path)
    missing = set(METRIC_COLUMNS) - set(frame.columns)
    if missing:
        raise DomainError(f"{path} is missing metric columns {sorted(missing)}")
    return frame
