"""
GP Noise
Gaussian-process priors and the flow-matching base distribution

The noise process uses a unit-variance squared-exponential kernel whose
lengthscale follows the mode count of the network. Factorizations escalate
jitter geometrically (x10) from GPConfig.jitter up to GPConfig.max_jitter.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.fft import dct
from scipy.special import erf

from cache import CachePatterns
from config import GPConfig
from data import Discretization, FunctionSample
from errors import DomainError, FactorizationError

logger = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)


def lengthscale_heuristic(modes: int) -> float:
    """l = 2 / (pi (M/2 + 1)); keeps >99% of the noise power in the first M modes"""
    if modes < 1:
        raise DomainError(f"mode count must be >= 1, got {modes}")
    return 2.0 / (np.pi * (modes / 2.0 + 1.0))


def spectral_power_fraction(modes: int, dim: int, lengthscale: float) -> float:
    """Expected fraction of squared-exponential spectral power with |f|_inf <= M/2"""
    if modes < 1 or dim < 1 or lengthscale <= 0:
        raise DomainError(f"need M >= 1, D >= 1, l > 0 (got {modes}, {dim}, {lengthscale})")
    return float(erf(np.pi * lengthscale * modes / np.sqrt(2.0)) ** dim)


def empirical_power_fraction(values: np.ndarray, modes: int) -> np.ndarray:
    """
    Per-draw fraction of power at frequencies up to M/2 for 1-D samples on a uniform grid

    Uses the even (mirror) extension so the finite window adds no jump
    discontinuity; cosine index j corresponds to frequency j/2.

    Args:
        values: (S, N) draws
        modes: M

    Returns:
        (S,) fractions in [0, 1]
    """
    coeffs = dct(np.atleast_2d(values), type=2, norm="ortho", axis=-1)
    power = coeffs ** 2
    return power[:, : modes + 1].sum(axis=1) / power.sum(axis=1)


def default_noise_config(modes: int) -> GPConfig:
    return GPConfig(lengthscale=lengthscale_heuristic(modes))


# ===================
# Kernels
# ===================

def kernel_matrix(pos_a: np.ndarray, pos_b: np.ndarray, cfg: GPConfig) -> np.ndarray:
    """
    Covariance between two point sets

    Args:
        pos_a: (Na, D) positions
        pos_b: (Nb, D) positions
        cfg: kernel settings

    Returns:
        (Na, Nb) kernel matrix, no jitter added
    """
    a = np.asarray(pos_a, dtype=np.float64).reshape(len(pos_a), -1)
    b = np.asarray(pos_b, dtype=np.float64).reshape(len(pos_b), -1)
    sq = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    if cfg.kernel == "squared_exponential":
        k = np.exp(-0.5 * sq / cfg.lengthscale ** 2)
    else:
        r = np.sqrt(5.0 * sq) / cfg.lengthscale
        k = (1.0 + r + r * r / 3.0) * np.exp(-r)
    return cfg.variance * k


def jittered_cholesky(K: np.ndarray, jitter: float = 1e-8, max_jitter: float = 1e-4) -> Tuple[np.ndarray, float]:
    """Lower Cholesky factor of K, adding jitter until it factorizes; returns (L, jitter used)"""
    identity = np.eye(K.shape[0])
    while True:
        try:
            return linalg.cholesky(K + jitter * identity, lower=True), jitter
        except linalg.LinAlgError:
            next_jitter = max(jitter * 10.0, 1e-8)
            if next_jitter > max_jitter * (1 + 1e-12):
                raise FactorizationError(
                    f"Cholesky failed for {K.shape[0]} points up to jitter {jitter:.1e}", jitter=jitter
                )
            logger.warning(f"Cholesky failed at jitter {jitter:.1e}; retrying with {next_jitter:.1e}")
            jitter = next_jitter


@dataclass(eq=False)
class GPFactor:
    """
    Lower Cholesky factor of a kernel matrix, dense or as a Kronecker product

    For tensor grids in row-major order, L = L_1 kron L_2 kron ... with one
    factor per axis.
    """
    factors: List[np.ndarray]
    jitter: float

    @property
    def n_points(self) -> int:
        return int(np.prod([f.shape[0] for f in self.factors]))

    @property
    def is_kronecker(self) -> bool:
        return len(self.factors) > 1

    def _apply(self, values: np.ndarray, transform) -> np.ndarray:
        """Apply per-axis maps to (S, N, C) values"""
        s, n, c = values.shape
        shape = [f.shape[0] for f in self.factors]
        grid = values.reshape([s] + shape + [c])
        for axis, f in enumerate(self.factors):
            grid = np.moveaxis(np.tensordot(transform(f), grid, axes=([1], [axis + 1])), 0, axis + 1)
        return grid.reshape(s, n, c)

    def matvec(self, z: np.ndarray) -> np.ndarray:
        """L z for (S, N, C) standard-normal draws"""
        if not self.is_kronecker:
            return np.einsum("ij,sjc->sic", self.factors[0], z)
        return self._apply(z, lambda f: f)

    def whiten(self, values: np.ndarray) -> np.ndarray:
        """L^{-1} v for (S, N, C) values"""
        if not self.is_kronecker:
            s, n, c = values.shape
            flat = np.moveaxis(values, 1, 0).reshape(n, s * c)
            w = linalg.solve_triangular(self.factors[0], flat, lower=True)
            return np.moveaxis(w.reshape(n, s, c), 0, 1)
        return self._apply(values, lambda f: linalg.solve_triangular(f, np.eye(f.shape[0]), lower=True))

    def logdet(self) -> float:
        """log |K|"""
        n = self.n_points
        total = 0.0
        for f in self.factors:
            total += (n / f.shape[0]) * np.sum(np.log(np.diag(f)))
        return 2.0 * float(total)

    def log_density(self, values: np.ndarray) -> np.ndarray:
        """log N(v; 0, K) summed over channels, for (S, N, C) values -> (S,)"""
        w = self.whiten(values)
        c = values.shape[2]
        return -0.5 * np.sum(w * w, axis=(1, 2)) - 0.5 * c * (self.logdet() + self.n_points * _LOG_2PI)


def _tensor_axes(disc: Discretization) -> Optional[List[np.ndarray]]:
    """Per-axis coordinates when the discretization is an axis-aligned tensor grid"""
    if disc.grid_shape is None or disc.dim < 2:
        return None
    grid = disc.positions.reshape(*disc.grid_shape, disc.dim)
    axes = []
    for d in range(disc.dim):
        index = [0] * disc.dim
        index[d] = slice(None)
        axes.append(grid[tuple(index) + (d,)].copy())
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    if not np.allclose(mesh, grid, atol=1e-12):
        return None
    return axes


def factorize(disc: Discretization, cfg: GPConfig) -> GPFactor:
    if disc.n_points == 0:
        raise DomainError("cannot factorize a kernel on an empty discretization")
    axes = _tensor_axes(disc) if cfg.kernel == "squared_exponential" else None
    if axes is not None:
        per_axis = [cfg.model_copy(update={"variance": 1.0}) for _ in axes]
        results = [
            jittered_cholesky(kernel_matrix(a[:, None], a[:, None], c), c.jitter, c.max_jitter)
            for a, c in zip(axes, per_axis)
        ]
        factors = [r[0] for r in results]
        factors[0] = factors[0] * np.sqrt(cfg.variance)
        return GPFactor(factors, max(r[1] for r in results))
    K = kernel_matrix(disc.positions, disc.positions, cfg)
    L, jitter = jittered_cholesky(K, cfg.jitter, cfg.max_jitter)
    return GPFactor([L], jitter)


def gp_factor(disc: Discretization, cfg: GPConfig, use_cache: bool = True) -> GPFactor:
    """Cholesky factor of K(pos, pos), memoized per (positions, kernel settings)"""
    if not use_cache:
        return factorize(disc, cfg)
    key = f"chol:{disc.key()}:{cfg.model_dump_json()}"
    return CachePatterns.get_or_set(key, lambda: factorize(disc, cfg))


# ===================
# Sampling
# ===================

def sample_gp_batch(
    disc: Discretization, cfg: GPConfig, rng: np.random.Generator, n_samples: int, channels: int = 1,
    use_cache: bool = True,
) -> np.ndarray:
    """(S, N, C) independent GP draws on one discretization"""
    factor = gp_factor(disc, cfg, use_cache)
    z = rng.standard_normal((n_samples, disc.n_points, channels))
    return factor.matvec(z)


def sample_gp(pos: Discretization, cfg: GPConfig, rng: np.random.Generator, channels: int = 1) -> FunctionSample:
    """L z with z ~ N(0, I); deterministic given the rng state"""
    return FunctionSample(sample_gp_batch(pos, cfg, rng, 1, channels)[0], pos)


@dataclass(eq=False)
class NoisePath:
    """Conditional path N((1-t) theta, t^2 K) for one parameter function"""
    t: float
    theta: FunctionSample
    cfg: GPConfig

    @property
    def mean(self) -> np.ndarray:
        return (1.0 - self.t) * self.theta.values

    def covariance(self) -> np.ndarray:
        pos = self.theta.discretization.positions
        return self.t ** 2 * kernel_matrix(pos, pos, self.cfg)

    def interpolate(self, eps: np.ndarray) -> np.ndarray:
        return (1.0 - self.t) * self.theta.values + self.t * eps


def sample_noised(
    theta: FunctionSample, t: float, cfg: GPConfig, rng: np.random.Generator, use_cache: bool = True,
) -> Tuple[FunctionSample, FunctionSample]:
    """
    Draw xi_t = (1-t) theta + t eps with eps from the GP base

    Returns:
        (xi_t, eps), both on theta's discretization
    """
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"flow time must lie in [0, 1], got {t}")
    disc = theta.discretization
    eps = sample_gp_batch(disc, cfg, rng, 1, theta.channels, use_cache)[0]
    path = NoisePath(t, theta, cfg)
    return FunctionSample(path.interpolate(eps), disc), FunctionSample(eps, disc)


def sample_eta_noise(eta: np.ndarray, t: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """z_t = (1-t) eta + t z with z ~ N(0, I); returns (z_t, z)"""
    z = rng.standard_normal(np.shape(eta))
    return (1.0 - t) * eta + t * z, z


def gp_log_density(values: np.ndarray, disc: Discretization, cfg: GPConfig) -> np.ndarray:
    """log density of (S, N, C) values under the zero-mean GP on disc"""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        values = values[None]
    return gp_factor(disc, cfg).log_density(values)


def standard_normal_log_density(values: np.ndarray) -> np.ndarray:
    """log N(v; 0, I) for (S, E) rows"""
    values = np.atleast_2d(values)
    return -0.5 * np.sum(values ** 2, axis=1) - 0.5 * values.shape[1] * _LOG_2PI
