"""
Evaluation Metrics
Sliced Wasserstein distance, SBC ranks and error of diagonal, posterior-predictive MSE
and per-point log-probability
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from scipy.stats import chisquare

from errors import DomainError, SamplerError, ShapeError

logger = logging.getLogger(__name__)

RANK_DITHER = 1e-12


# ===================
# Sliced Wasserstein
# ===================

def swd(
    samples_a: np.ndarray, samples_b: np.ndarray, n_projections: int = 50, rng: np.random.Generator = None,
) -> float:
    """
    sqrt of the mean squared 1-D Wasserstein-2 distance over random unit projections

    Unequal sample counts are compared through interpolated quantiles at the
    midpoint levels of the larger set.
    """
    a = np.asarray(samples_a, dtype=np.float64).reshape(len(samples_a), -1)
    b = np.asarray(samples_b, dtype=np.float64).reshape(len(samples_b), -1)
    if a.shape[1] != b.shape[1]:
        raise ShapeError("swd", a.shape, b.shape, "sample dimensionality")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise DomainError("swd needs at least two samples in each set")
    rng = rng if rng is not None else np.random.default_rng(0)

    directions = rng.standard_normal((a.shape[1], n_projections))
    directions /= np.linalg.norm(directions, axis=0, keepdims=True)
    proj_a = np.sort(a @ directions, axis=0)
    proj_b = np.sort(b @ directions, axis=0)
    if proj_a.shape[0] != proj_b.shape[0]:
        n = max(proj_a.shape[0], proj_b.shape[0])
        levels = (np.arange(n) + 0.5) / n
        proj_a = np.quantile(proj_a, levels, axis=0)
        proj_b = np.quantile(proj_b, levels, axis=0)
    return float(np.sqrt(np.mean((proj_a - proj_b) ** 2)))


# ===================
# Simulation-Based Calibration
# ===================

@dataclass
class RankTable:
    """ranks[j, i]: posterior draws of record j strictly below the truth in dimension i"""
    ranks: np.ndarray  # (N_test, d) ints in [0, n_post]
    n_post: int
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.ranks = np.asarray(self.ranks)
        if self.ranks.ndim != 2:
            raise ShapeError("RankTable", self.ranks.shape, ("N_test", "d"))
        if self.ranks.size and (self.ranks.min() < 0 or self.ranks.max() > self.n_post):
            raise DomainError(f"ranks must lie in [0, {self.n_post}]")

    @property
    def n_test(self) -> int:
        return self.ranks.shape[0]

    @property
    def n_dims(self) -> int:
        return self.ranks.shape[1]


def sbc_ranks(
    posterior_sampler: Callable[[int], np.ndarray],
    test_thetas: np.ndarray,
    n_post: int,
    rng: np.random.Generator = None,
) -> RankTable:
    """
    Marginal SBC ranks

    Args:
        posterior_sampler: record index -> (n_post, d) posterior draws reduced to the SBC dimensions
        test_thetas: (N_test, d) ground truth in the same dimensions
        n_post: draws per record
        rng: dither stream (ties broken by adding U(0, 1e-12) to the draws)

    Raises:
        SamplerError: a posterior sampler call failed, naming the record
    """
    test_thetas = np.asarray(test_thetas, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(0)
    ranks = np.zeros(test_thetas.shape, dtype=np.int64)
    for j, truth in enumerate(test_thetas):
        try:
            draws = np.asarray(posterior_sampler(j), dtype=np.float64).reshape(n_post, -1)
        except Exception as e:
            raise SamplerError(str(e), record_index=j) from e
        draws = draws + rng.uniform(0.0, RANK_DITHER, size=draws.shape)
        ranks[j] = np.sum(draws < truth[None, :], axis=0)
    return RankTable(ranks, n_post, {"rank_convention": "strictly_below", "dither": RANK_DITHER})


def sbc_eod(table: RankTable) -> float:
    """
    Error of diagonal: integral over [0, 1] of |CDF(a) - a|, CDF(a) = mean(r / n_post < a)

    The CDF is a step function, so the integral is summed exactly per step.
    """
    if table.ranks.size == 0:
        raise DomainError("empty rank table")
    values = np.sort(table.ranks.reshape(-1) / table.n_post)
    total = values.size
    breaks = np.unique(np.concatenate([[0.0, 1.0], values[(values > 0) & (values < 1)]]))
    eod = 0.0
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        c = np.searchsorted(values, lo, side="right") / total
        if c <= lo:
            eod += ((hi - c) ** 2 - (lo - c) ** 2) / 2.0
        elif c >= hi:
            eod += ((c - lo) ** 2 - (c - hi) ** 2) / 2.0
        else:
            eod += ((c - lo) ** 2 + (hi - c) ** 2) / 2.0
    return float(eod)


def sbc_eod_lower_bound(
    n_test: int, n_dims: int, n_post: int, n_replicates: int = 100, rng: np.random.Generator = None,
) -> float:
    """Mean EoD of uniformly sampled ranks at the same table size"""
    rng = rng if rng is not None else np.random.default_rng(0)
    values = [
        sbc_eod(RankTable(rng.integers(0, n_post + 1, size=(n_test, n_dims)), n_post))
        for _ in range(n_replicates)
    ]
    return float(np.mean(values))


def rank_uniformity_pvalue(table: RankTable, n_bins: int = 20) -> float:
    """Chi-square test of the pooled rank histogram against the discrete uniform on [0, n_post]"""
    n_values = table.n_post + 1
    n_bins = min(n_bins, n_values)
    edges = np.linspace(0, n_values, n_bins + 1)
    observed, _ = np.histogram(table.ranks.reshape(-1), bins=edges)
    per_bin = np.histogram(np.arange(n_values), bins=edges)[0]
    expected = per_bin / n_values * observed.sum()
    return float(chisquare(observed, expected).pvalue)


# ===================
# Predictive and Log-Probability
# ===================

@dataclass
class PredictiveResult:
    mse: float
    n_failed: int


def predictive_mse(
    posterior_samples: Sequence[np.ndarray],
    simulator: Callable[[int, np.ndarray], np.ndarray],
    observations: Sequence[np.ndarray],
) -> PredictiveResult:
    """
    Mean over records and draws of ||x_ij - x_o_j||^2 / |pos_x_j|

    Args:
        posterior_samples: per record, the draws handed to the simulator
        simulator: (record index, draws) -> (n_draws, N_x, C_x) fresh simulations
        observations: per record, (N_x, C_x) observed data

    Records whose simulation raises are excluded and counted in n_failed.
    """
    per_record: List[float] = []
    n_failed = 0
    for j, (draws, x_o) in enumerate(zip(posterior_samples, observations)):
        try:
            x = np.asarray(simulator(j, draws), dtype=np.float64)
        except Exception as e:
            logger.warning(f"Predictive simulation failed for record {j}: {e}")
            n_failed += 1
            continue
        x_o = np.asarray(x_o, dtype=np.float64)
        sq = np.sum((x - x_o[None]) ** 2, axis=tuple(range(2, x.ndim)))
        per_record.append(float(np.mean(np.sum(sq, axis=1) / x_o.shape[0])))
    mse = float(np.mean(per_record)) if per_record else float("nan")
    return PredictiveResult(mse, n_failed)


def logprob_per_point(log_prob_fn: Callable[[int], float], n_points: Sequence[int]) -> float:
    """Mean over records of log q(theta_o | x_o) / |pos_theta|"""
    if len(n_points) == 0:
        raise DomainError("no test records")
    values = [log_prob_fn(j) / n for j, n in enumerate(n_points)]
    return float(np.mean(values))


def subset_indices(n_points: int, n_dims: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded uniform subset of point indices (sorted) used as SBC marginals"""
    if n_dims >= n_points:
        return np.arange(n_points)
    return np.sort(rng.choice(n_points, size=n_dims, replace=False))
