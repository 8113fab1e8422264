"""
Task Simulators
Benchmark priors and forward models: linear Gaussian, SIRD with a time-varying
contact rate, and 2-D Darcy flow with a log-normal permeability prior

Positions are normalized to [0, 1) so uniform simulator grids are periodic-uniform:
SIRD time t sits at t / (T_max N / (N - 1)), Darcy node (i, j) at (i / L, j / L).
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, fields
from typing import Any, Callable, ClassVar, Dict, List, Optional, Tuple, Type

import numpy as np
from scipy import linalg, sparse
from scipy.fft import idctn
from scipy.sparse.linalg import cg
from scipy.special import expit

from config import GPConfig, get_settings
from data import Discretization, SimulationSet
from errors import ConfigError, DomainError, SolverError, UnknownNameError
from gp_noise import gp_factor, jittered_cholesky, sample_gp_batch

logger = logging.getLogger(__name__)

try:
    from tqdm import tqdm
    TQDM_AVAILABLE = True
except ImportError:
    TQDM_AVAILABLE = False


# ===================
# Task Registry
# ===================

TASKS: Dict[str, Type["Task"]] = {}


def register_task(name: str) -> Callable[[Type["Task"]], Type["Task"]]:
    def decorator(cls: Type["Task"]) -> Type["Task"]:
        cls.name = name
        TASKS[name] = cls
        return cls
    return decorator


def list_tasks() -> List[str]:
    return sorted(TASKS)


def get_task(name: str, **options: Any) -> "Task":
    """
    Instantiate a registered task

    Raises:
        UnknownNameError: name is not registered
        ConfigError: an option is not a field of the task
    """
    if name not in TASKS:
        raise UnknownNameError("task", name, list_tasks())
    cls = TASKS[name]
    known = {f.name for f in fields(cls) if f.init}
    unknown = set(options) - known
    if unknown:
        raise ConfigError(f"unknown options for task '{name}': {sorted(unknown)}")
    return cls(**options)


class Task(ABC):
    """Prior over (theta, eta) and a forward model producing observations"""
    name: ClassVar[str] = ""
    dim: ClassVar[int] = 1
    theta_channels: ClassVar[int] = 1
    x_channels: ClassVar[int] = 1
    eta_dim: ClassVar[int] = 0

    @abstractmethod
    def theta_discretization(self) -> Discretization:
        ...

    def x_discretization(self) -> Discretization:
        return self.theta_discretization()

    @abstractmethod
    def sample_prior(
        self, n: int, rng: np.random.Generator, pos_theta: Optional[np.ndarray] = None,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """(theta (n, N, C), eta (n, E)) on pos_theta (the task grid by default)"""

    @abstractmethod
    def simulate(
        self, theta: np.ndarray, eta: np.ndarray, rng: np.random.Generator,
        pos_theta: Optional[np.ndarray] = None, pos_x: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """Observations (n, N_x, C_x) for a batch sharing pos_theta and pos_x"""

    def eta_prior_std(self) -> np.ndarray:
        return np.zeros(0)

    def simulate_set(self, n: int, rng: np.random.Generator, batch_size: int = 500) -> SimulationSet:
        """n records on the dense task grids, simulated in batches"""
        pos_theta = self.theta_discretization().positions
        pos_x = self.x_discretization().positions
        thetas, etas, xs = [], [], []
        starts = range(0, n, batch_size)
        if get_settings().progress and TQDM_AVAILABLE:
            starts = tqdm(starts, desc=f"simulating {self.name}", leave=False)
        for start in starts:
            size = min(batch_size, n - start)
            theta, eta = self.sample_prior(size, rng)
            xs.append(self.simulate(theta, eta, rng))
            thetas.append(theta)
            etas.append(eta)
        theta = np.concatenate(thetas)
        logger.info(f"Simulated {n} records for task {self.name}")
        return SimulationSet(
            pos_theta=np.broadcast_to(pos_theta, (n,) + pos_theta.shape).copy(),
            theta=theta,
            pos_x=np.broadcast_to(pos_x, (n,) + pos_x.shape).copy(),
            x=np.concatenate(xs),
            eta=np.concatenate(etas),
        )

    def test_set(self, n: int, rng: np.random.Generator) -> SimulationSet:
        """Held-out observations; tasks with unseen evaluation discretizations override this"""
        return self.simulate_set(n, rng)

    def manifest(self) -> Dict[str, Any]:
        """Discretization schema recorded in archive manifests"""
        theta_disc, x_disc = self.theta_discretization(), self.x_discretization()
        return {
            "task": self.name,
            "dim": self.dim,
            "theta_points": theta_disc.n_points,
            "theta_grid": list(theta_disc.grid_shape or ()),
            "theta_channels": self.theta_channels,
            "x_points": x_disc.n_points,
            "x_grid": list(x_disc.grid_shape or ()),
            "x_channels": self.x_channels,
            "eta_dim": self.eta_dim,
        }


def _shared(positions: Optional[np.ndarray], default: Discretization) -> np.ndarray:
    return default.positions if positions is None else np.asarray(positions, dtype=np.float64)


# ===================
# Linear Gaussian
# ===================

@dataclass(eq=False)
class GaussianPosterior:
    """N(mean, covariance) over a function on a fixed discretization"""
    mean: np.ndarray        # (N,)
    covariance: np.ndarray  # (N, N)
    jitter: float = 1e-10
    _factor: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def factor(self) -> np.ndarray:
        if self._factor is None:
            self._factor, _ = jittered_cholesky(self.covariance, self.jitter, 1e-4)
        return self._factor

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """(n, N, 1) draws"""
        z = rng.standard_normal((n, self.mean.shape[0]))
        return (self.mean[None] + z @ self.factor.T)[..., None]


def gaussian_posterior(x_o: np.ndarray, prior_cov: np.ndarray, noise_var: float) -> GaussianPosterior:
    """
    Conjugate posterior of theta ~ N(0, K) given x = theta + noise, noise ~ N(0, s2 I)

    Computed as K - K (K + s2 I)^{-1} K, which equals (K^{-1} + I / s2)^{-1} without inverting K.
    """
    if noise_var <= 0:
        raise DomainError(f"noise variance must be positive, got {noise_var}")
    x_o = np.asarray(x_o, dtype=np.float64).reshape(-1)
    K = np.asarray(prior_cov, dtype=np.float64)
    chol = jittered_cholesky(K + noise_var * np.eye(K.shape[0]))[0]
    solve = lambda b: linalg.cho_solve((chol, True), b)
    cov = K - K @ solve(K)
    cov = 0.5 * (cov + cov.T)
    return GaussianPosterior(mean=K @ solve(x_o), covariance=cov)


@register_task("linear_gaussian")
@dataclass(eq=False)
class LinearGaussianTask(Task):
    """theta ~ GP(0, SE(l)) on a uniform grid, x = theta + N(0, noise_var I)"""
    n_points: int = 1000
    lengthscale: float = 0.05
    variance: float = 1.0
    noise_var: float = 0.1

    def __post_init__(self):
        if self.noise_var <= 0:
            raise DomainError(f"noise_var must be positive, got {self.noise_var}")

    @property
    def prior_cfg(self) -> GPConfig:
        return GPConfig(lengthscale=self.lengthscale, variance=self.variance)

    def theta_discretization(self) -> Discretization:
        return Discretization.uniform(self.n_points)

    def sample_prior(self, n, rng, pos_theta=None):
        disc = Discretization(_shared(pos_theta, self.theta_discretization()))
        return sample_gp_batch(disc, self.prior_cfg, rng, n), np.zeros((n, 0))

    def simulate(self, theta, eta, rng, pos_theta=None, pos_x=None):
        return lg_simulate(theta, self, rng)

    def prior_covariance(self) -> np.ndarray:
        """Covariance actually sampled by sample_prior (kernel plus factorization jitter)"""
        L = gp_factor(self.theta_discretization(), self.prior_cfg).factors[0]
        return L @ L.T


def lg_simulate(theta: np.ndarray, task: LinearGaussianTask, rng: np.random.Generator) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    return theta + np.sqrt(task.noise_var) * rng.standard_normal(theta.shape)


def lg_analytic_posterior(x_o: np.ndarray, task: LinearGaussianTask) -> GaussianPosterior:
    return gaussian_posterior(x_o, task.prior_covariance(), task.noise_var)


# ===================
# SIRD
# ===================

def _interp_weights(knots: np.ndarray, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Linear interpolation indices/weights with flat extrapolation, shared across a batch"""
    t = np.clip(t, knots[0], knots[-1])
    hi = np.clip(np.searchsorted(knots, t, side="right"), 1, len(knots) - 1)
    lo = hi - 1
    span = knots[hi] - knots[lo]
    w = np.where(span > 0, (t - knots[lo]) / np.where(span > 0, span, 1.0), 0.0)
    return lo, hi, w


@register_task("sird")
@dataclass(eq=False)
class SirdTask(Task):
    """
    dS = -b S I, dI = b S I - (g + m) I, dR = g I, dD = m I

    theta is the contact rate b(t) = sigmoid(GP draw); eta = (g, m) ~ U(0, 0.5)^2.
    Observed channels are I, R and D with multiplicative log-normal noise.
    """
    n_points: int = 100
    t_max: float = 50.0
    n_eval_points: Optional[int] = 40
    beta_lengthscale: float = 7.0
    beta_variance: float = 1.0
    rate_high: float = 0.5
    noise_std: float = 0.05
    initial_state: Tuple[float, float, float, float] = (0.99, 0.01, 0.0, 0.0)
    max_dt: float = 0.05

    x_channels: ClassVar[int] = 3
    eta_dim: ClassVar[int] = 2

    @property
    def time_scale(self) -> float:
        """Days per unit of normalized position"""
        return self.t_max * self.n_points / (self.n_points - 1)

    @property
    def grid_end(self) -> float:
        """Normalized position of the last training time point (t_max days)"""
        return (self.n_points - 1) / self.n_points

    @property
    def prior_cfg(self) -> GPConfig:
        return GPConfig(lengthscale=self.beta_lengthscale / self.time_scale, variance=self.beta_variance)

    def theta_discretization(self) -> Discretization:
        return Discretization.uniform(self.n_points)

    def eta_prior_std(self) -> np.ndarray:
        return np.full(2, self.rate_high / np.sqrt(12.0))

    def sample_prior(self, n, rng, pos_theta=None):
        disc = Discretization(_shared(pos_theta, self.theta_discretization()))
        beta = expit(sample_gp_batch(disc, self.prior_cfg, rng, n))
        eta = rng.uniform(0.0, self.rate_high, size=(n, 2))
        return beta, eta

    def trajectories(
        self, beta: np.ndarray, eta: np.ndarray, pos_theta: Optional[np.ndarray] = None,
        pos_x: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """Noise-free (S, I, R, D) at pos_x, shape (n, N_x, 4)"""
        knots = _shared(pos_theta, self.theta_discretization())[:, 0] * self.time_scale
        times = _shared(pos_x, self.x_discretization())[:, 0] * self.time_scale
        return sird_integrate(np.asarray(beta)[..., 0], knots, eta[:, 0], eta[:, 1], times,
                              self.initial_state, self.max_dt)

    def simulate(self, theta, eta, rng, pos_theta=None, pos_x=None):
        states = self.trajectories(theta, eta, pos_theta, pos_x)
        return add_lognormal_noise(states[..., 1:], self.noise_std, rng)

    def test_set(self, n: int, rng: np.random.Generator) -> SimulationSet:
        """Each record on its own random time points (sorted), shared by beta and observations"""
        if not self.n_eval_points:
            return self.simulate_set(n, rng)
        pos, thetas, xs, etas = [], [], [], []
        for _ in range(n):
            p = np.sort(rng.uniform(0.0, self.grid_end, size=(self.n_eval_points, 1)), axis=0)
            theta, eta = self.sample_prior(1, rng, p)
            xs.append(self.simulate(theta, eta, rng, p, p)[0])
            pos.append(p)
            thetas.append(theta[0])
            etas.append(eta[0])
        pos = np.stack(pos)
        return SimulationSet(pos, np.stack(thetas), pos.copy(), np.stack(xs), np.stack(etas))


def sird_simulate(
    beta: np.ndarray, gamma: np.ndarray, mu: np.ndarray, task: SirdTask, rng: np.random.Generator,
    pos_theta: Optional[np.ndarray] = None, pos_x: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Noisy (I, R, D) observations for contact rates beta (n, N, 1) and per-record rates gamma, mu"""
    eta = np.stack([np.asarray(gamma, dtype=np.float64), np.asarray(mu, dtype=np.float64)], axis=-1)
    return task.simulate(beta, eta.reshape(-1, 2), rng, pos_theta, pos_x)


def sird_integrate(
    beta: np.ndarray,
    knots: np.ndarray,
    gamma: np.ndarray,
    mu: np.ndarray,
    times: np.ndarray,
    initial_state=(0.99, 0.01, 0.0, 0.0),
    max_dt: float = 0.05,
) -> np.ndarray:
    """
    RK4 with at most max_dt per substep, stopping exactly at each output time

    Args:
        beta: (B, K) contact rate at knot times (linear interpolation, flat outside)
        knots: (K,) increasing knot times
        gamma, mu: (B,) rates
        times: (T,) output times >= 0

    Returns:
        (B, T, 4) states ordered as the sorted output times were given
    """
    beta = np.atleast_2d(np.asarray(beta, dtype=np.float64))
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    knots = np.asarray(knots, dtype=np.float64)
    order = np.argsort(times, kind="stable")
    sorted_times = np.asarray(times, dtype=np.float64)[order]
    if sorted_times.size and sorted_times[0] < 0:
        raise DomainError(f"output times must be nonnegative, got {sorted_times[0]}")

    def beta_at(t: float) -> np.ndarray:
        lo, hi, w = _interp_weights(knots, np.array([t]))
        return beta[:, lo[0]] * (1.0 - w[0]) + beta[:, hi[0]] * w[0]

    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        s, i = y[:, 0], y[:, 1]
        infection = beta_at(t) * s * i
        return np.stack([-infection, infection - (gamma + mu) * i, gamma * i, mu * i], axis=1)

    y = np.broadcast_to(np.asarray(initial_state, dtype=np.float64), (beta.shape[0], 4)).copy()
    out = np.empty((beta.shape[0], len(sorted_times), 4))
    t = 0.0
    for j, t_next in enumerate(sorted_times):
        n_sub = int(np.ceil((t_next - t) / max_dt - 1e-12)) if t_next > t else 0
        h = (t_next - t) / n_sub if n_sub else 0.0
        for _ in range(n_sub):
            k1 = rhs(t, y)
            k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
            k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
            k4 = rhs(t + h, y + h * k3)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t += h
        if np.any(y < -1e-9):
            raise SolverError(f"negative SIRD state {y.min():.3e} at t={t_next:.4f}", residual=float(y.min()))
        t = t_next
        out[:, j] = y
    result = np.empty_like(out)
    result[:, order] = out
    return result


def add_lognormal_noise(values: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    """values * exp(std z - std^2 / 2): log-normal with mean equal to each noise-free value"""
    return values * np.exp(std * rng.standard_normal(values.shape) - 0.5 * std ** 2)


# ===================
# Darcy Flow
# ===================

@register_task("darcy")
@dataclass(eq=False)
class DarcyTask(Task):
    """
    -div(a grad u) = 1 on the unit square with u = 0 on the boundary

    theta is the log-permeability b ~ N(0, (-Laplacian + tau I)^{-2}) on an L x L grid,
    a = exp(log_scale b); the observation is u with per-pixel Gaussian noise at a fixed SNR.
    """
    grid_size: int = 64
    tau: float = 9.0
    log_scale: float = 1000.0
    snr: float = 30.0
    cg_rtol: float = 1e-10
    cg_maxiter: int = 20000
    residual_tol: float = 1e-8

    dim: ClassVar[int] = 2

    def __post_init__(self):
        if self.grid_size < 3:
            raise DomainError(f"Darcy grid needs at least 3 nodes per side, got {self.grid_size}")

    def theta_discretization(self) -> Discretization:
        return Discretization.uniform((self.grid_size, self.grid_size))

    def _check_grid(self, positions: Optional[np.ndarray]) -> None:
        if positions is not None and not np.array_equal(positions, self.theta_discretization().positions):
            raise DomainError("the Darcy solver only runs on its own L x L grid")

    def sample_prior(self, n, rng, pos_theta=None):
        self._check_grid(pos_theta)
        b, _ = darcy_prior_sample(self, rng, n)
        return b.reshape(n, -1, 1), np.zeros((n, 0))

    def simulate(self, theta, eta, rng, pos_theta=None, pos_x=None):
        self._check_grid(pos_theta)
        self._check_grid(pos_x)
        size = self.grid_size
        b = np.asarray(theta, dtype=np.float64).reshape(-1, size, size)
        u = np.stack([darcy_solve(np.exp(self.log_scale * bi), self) for bi in b])
        return add_observation_noise(u, self.snr, rng).reshape(len(b), -1, 1)


def darcy_solve(a: np.ndarray, task: DarcyTask) -> np.ndarray:
    """
    Five-point finite differences with harmonic-mean face coefficients, solved by
    Jacobi-preconditioned CG

    Args:
        a: (L, L) positive permeability on the grid nodes (boundary rows included)

    Returns:
        (L, L) hydraulic potential, exactly zero on the boundary

    Raises:
        SolverError: CG did not reach the residual tolerance
    """
    a = np.asarray(a, dtype=np.float64)
    size = a.shape[0]
    if a.shape != (size, size):
        raise DomainError(f"permeability must be square, got {a.shape}")
    if np.any(a <= 0) or not np.all(np.isfinite(a)):
        raise DomainError("permeability must be positive and finite")
    n = size - 2
    h = 1.0 / (size - 1)
    face_i = 2.0 * a[1:, :] * a[:-1, :] / (a[1:, :] + a[:-1, :])   # between (i, j) and (i+1, j)
    face_j = 2.0 * a[:, 1:] * a[:, :-1] / (a[:, 1:] + a[:, :-1])   # between (i, j) and (i, j+1)

    ii, jj = np.meshgrid(np.arange(1, size - 1), np.arange(1, size - 1), indexing="ij")
    index = (ii - 1) * n + (jj - 1)
    diag = face_i[ii - 1, jj] + face_i[ii, jj] + face_j[ii, jj - 1] + face_j[ii, jj]
    rows, cols, vals = [index.ravel()], [index.ravel()], [diag.ravel()]
    # couplings to interior neighbours only; boundary values are zero
    down = ii < size - 2
    rows.append(index[down]); cols.append(index[down] + n); vals.append(-face_i[ii, jj][down])
    up = ii > 1
    rows.append(index[up]); cols.append(index[up] - n); vals.append(-face_i[ii - 1, jj][up])
    right = jj < size - 2
    rows.append(index[right]); cols.append(index[right] + 1); vals.append(-face_j[ii, jj][right])
    left = jj > 1
    rows.append(index[left]); cols.append(index[left] - 1); vals.append(-face_j[ii, jj - 1][left])
    A = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n)
    )
    rhs = np.full(n * n, h * h)
    preconditioner = sparse.diags(1.0 / diag.ravel())
    solution, info = cg(A, rhs, rtol=task.cg_rtol, maxiter=task.cg_maxiter, M=preconditioner)
    residual = float(np.linalg.norm(A @ solution - rhs) / np.linalg.norm(rhs))
    if info != 0 or residual > task.residual_tol:
        raise SolverError(f"CG stopped with relative residual {residual:.2e} (info={info})", residual=residual)
    u = np.zeros((size, size))
    u[1:-1, 1:-1] = solution.reshape(n, n)
    return u


def _cosine_eigen(task: DarcyTask) -> Tuple[np.ndarray, np.ndarray]:
    """(lambda (L, L) Neumann Laplacian eigenvalues, orthonormal cosine basis (L nodes, L modes))"""
    size = task.grid_size
    k = np.arange(size)
    lam = np.pi ** 2 * (k[:, None] ** 2 + k[None, :] ** 2)
    weights = np.where(k == 0, 1.0, 2.0)
    basis = np.sqrt(weights[None, :] / size) * np.cos(np.pi * k[None, :] * (np.arange(size)[:, None] + 0.5) / size)
    return lam, basis


def darcy_prior_sample(task: DarcyTask, rng: np.random.Generator, n: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    Log-permeability b = sum_k z_k (lambda_k + tau)^{-1} phi_k over homogeneous-Neumann
    cosine eigenmodes (mean mode included), and permeability a = exp(log_scale b)

    Returns:
        (b, a), each (n, L, L)
    """
    lam, _ = _cosine_eigen(task)
    z = rng.standard_normal((n,) + lam.shape)
    b = idctn(z / (lam + task.tau), axes=(1, 2), type=2, norm="ortho")
    return b, np.exp(task.log_scale * b)


def darcy_prior_variance(task: DarcyTask) -> np.ndarray:
    """Pointwise variance of b: sum_k (lambda_k + tau)^{-2} phi_k(x)^2, shape (L, L)"""
    lam, basis = _cosine_eigen(task)
    sq = basis ** 2
    return sq @ ((lam + task.tau) ** -2.0) @ sq.T


def add_observation_noise(u: np.ndarray, snr: float, rng: np.random.Generator) -> np.ndarray:
    """
    Per-pixel Gaussian noise with std sigma_i = mean over the batch of u_i^2 / snr

    Args:
        u: (B, ...) noise-free batch
    """
    if snr <= 0:
        raise DomainError(f"snr must be positive, got {snr}")
    u = np.asarray(u, dtype=np.float64)
    if np.isinf(snr):
        return u.copy()
    sigma = np.mean(u ** 2, axis=0) / snr
    return u + sigma[None] * rng.standard_normal(u.shape)
