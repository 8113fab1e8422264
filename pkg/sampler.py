"""
Flow Sampler
Posterior sampling by integrating the learned velocity from t=1 to t=0, and
log-probabilities through the instantaneous change-of-variables formula

The time grid is t_k = 1 - k/n. Sampling takes n-1 scheme steps on the open
grid and a final Euler step into t=0, so t=0 is never evaluated; the forward
(log-probability) pass mirrors this by evaluating its first step at t=1/n.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from autodiff import Tensor, get_dtype, no_grad, vjp
from config import GPConfig, OdeConfig
from data import Discretization
from errors import NonFiniteError
from gp_noise import GPFactor, gp_factor, standard_normal_log_density
from training import Standardizer
from velocity_net import Conditioning, VelocityNet

logger = logging.getLogger(__name__)

try:
    from tqdm import tqdm
    TQDM_AVAILABLE = True
except ImportError:
    TQDM_AVAILABLE = False

# (t, xi (S, N, C), eta (S, E) or None) -> (v_xi, v_eta or None)
VelocityFn = Callable[[float, Tensor, Optional[Tensor]], Tuple[Tensor, Optional[Tensor]]]


# ===================
# Base Distributions
# ===================

@dataclass(eq=False)
class BaseDistribution:
    """
    t=1 distribution: GP (or white noise when factor is None) over the
    function state and N(0, I) over eta
    """
    n_points: int
    channels: int
    eta_dim: int = 0
    factor: Optional[GPFactor] = None

    def sample(self, rngs: List[np.random.Generator]) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        z = np.stack([r.standard_normal((self.n_points, self.channels)) for r in rngs])
        eta = np.stack([r.standard_normal(self.eta_dim) for r in rngs]) if self.eta_dim > 0 else None
        xi = self.factor.matvec(z) if self.factor is not None else z
        return xi, eta

    def log_density(self, xi: np.ndarray, eta: Optional[np.ndarray]) -> np.ndarray:
        if self.factor is not None:
            out = self.factor.log_density(xi)
        else:
            flat = xi.reshape(xi.shape[0], -1)
            out = standard_normal_log_density(flat)
        if eta is not None and self.eta_dim > 0:
            out = out + standard_normal_log_density(eta)
        return out


def gp_base(pos_theta: np.ndarray, gp_cfg: GPConfig, channels: int, eta_dim: int = 0) -> BaseDistribution:
    disc = Discretization(pos_theta)
    return BaseDistribution(disc.n_points, channels, eta_dim, gp_factor(disc, gp_cfg))


def white_base(dim: int, eta_dim: int = 0) -> BaseDistribution:
    return BaseDistribution(dim, 1, eta_dim, None)


def spawn_streams(rng: np.random.Generator, n: int) -> List[np.random.Generator]:
    """Independent child streams, one per sample"""
    root = np.random.SeedSequence(int(rng.integers(0, 2 ** 63)))
    return [np.random.default_rng(s) for s in root.spawn(n)]


# ===================
# Conditioned FNO Velocity
# ===================

class ConditionedVelocity:
    """
    FNO velocity for one observation on a fixed pos_theta, callable on any batch size

    A 'literal' training target learned t (eps - theta); the flow velocity is then v / t.
    """

    def __init__(
        self,
        net: VelocityNet,
        x_o: np.ndarray,
        pos_x: np.ndarray,
        pos_theta: np.ndarray,
        grid_shape_theta=None,
        grid_shape_x=None,
        target: str = "rectified",
    ):
        self.net = net
        self.x_o = np.asarray(x_o)
        self.pos_x = np.asarray(pos_x)
        self.pos_theta = np.asarray(pos_theta)
        self.grid_shapes = (grid_shape_theta, grid_shape_x)
        self.target = target
        self._base: Optional[Conditioning] = None
        self._by_size: Dict[int, Conditioning] = {}

    def conditioning(self, batch_size: int) -> Conditioning:
        if batch_size in self._by_size:
            return self._by_size[batch_size]
        if self._base is None:
            self._base = self.net.condition(
                self.x_o[None], self.pos_x[None], self.pos_theta[None], *self.grid_shapes
            )
        base = self._base
        cond = Conditioning(
            pos_theta=np.broadcast_to(base.pos_theta, (batch_size,) + base.pos_theta.shape[1:]),
            pos_x=np.broadcast_to(base.pos_x, (batch_size,) + base.pos_x.shape[1:]),
            x_aligned=np.broadcast_to(base.x_aligned, (batch_size,) + base.x_aligned.shape[1:]),
            x_spectrum=np.broadcast_to(base.x_spectrum, (batch_size,) + base.x_spectrum.shape[1:]),
            op_theta=base.op_theta,
        )
        self._by_size = {batch_size: cond}
        return cond

    def __call__(self, t: float, xi: Tensor, eta: Optional[Tensor]) -> Tuple[Tensor, Optional[Tensor]]:
        cond = self.conditioning(xi.shape[0])
        v_xi, v_eta = self.net.forward(np.full(xi.shape[0], t), xi, eta, cond)
        if self.target == "literal":
            v_xi = v_xi * (1.0 / t)
            v_eta = v_eta * (1.0 / t) if v_eta is not None else None
        return v_xi, v_eta


# ===================
# Integration
# ===================

def _check(state: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(state)):
        raise NonFiniteError(f"non-finite state at integration step {step}", location="ode", step=step)


def _evaluate(velocity: VelocityFn, t: float, xi: np.ndarray, eta: Optional[np.ndarray]):
    with no_grad():
        v_xi, v_eta = velocity(t, Tensor(xi), Tensor(eta) if eta is not None else None)
    return v_xi.data, (v_eta.data if v_eta is not None else None)


def integrate_backward(
    velocity: VelocityFn, xi: np.ndarray, eta: Optional[np.ndarray], cfg: OdeConfig,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Integrate d(state)/dt = v from t=1 down to t=0"""
    n = cfg.n_steps
    h = 1.0 / n
    for k in range(n):
        t = 1.0 - k * h
        v_xi, v_eta = _evaluate(velocity, t, xi, eta)
        if cfg.scheme == "heun" and k < n - 1:
            xi_pred = xi - h * v_xi
            eta_pred = eta - h * v_eta if eta is not None else None
            w_xi, w_eta = _evaluate(velocity, t - h, xi_pred, eta_pred)
            xi = xi - 0.5 * h * (v_xi + w_xi)
            if eta is not None:
                eta = eta - 0.5 * h * (v_eta + w_eta)
        else:
            xi = xi - h * v_xi
            if eta is not None:
                eta = eta - h * v_eta
        _check(xi, k)
        if eta is not None:
            _check(eta, k)
    return xi, eta


def draw_samples(
    velocity: VelocityFn,
    base: BaseDistribution,
    n_samples: int,
    cfg: OdeConfig,
    rng: np.random.Generator,
    chunk_size: int = 256,
    progress: bool = False,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Base draws (one stream per sample) integrated to t=0, in the network's standardized space"""
    streams = spawn_streams(rng, n_samples)
    xs, etas = [], []
    starts = range(0, n_samples, chunk_size)
    if progress and TQDM_AVAILABLE:
        starts = tqdm(starts, desc="sampling", leave=False)
    for start in starts:
        xi, eta = base.sample(streams[start:start + chunk_size])
        xi = xi.astype(get_dtype())
        eta = eta.astype(get_dtype()) if eta is not None else None
        xi, eta = integrate_backward(velocity, xi, eta, cfg)
        xs.append(xi)
        if eta is not None:
            etas.append(eta)
    return np.concatenate(xs), (np.concatenate(etas) if etas else None)


def sample_posterior(
    net: VelocityNet,
    x_o: np.ndarray,
    pos_x: np.ndarray,
    pos_theta: np.ndarray,
    n_samples: int,
    gp_cfg: GPConfig,
    ode_cfg: OdeConfig,
    rng: np.random.Generator,
    standardizer: Optional[Standardizer] = None,
    target: str = "rectified",
    grid_shape_theta=None,
    grid_shape_x=None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Posterior draws of theta on exactly pos_theta (any discretization) and of eta

    Returns:
        theta (S, N_theta, C_theta) and eta (S, E); eta is (S, 0) without vector parameters
    """
    x_std = standardizer.x.forward(x_o) if standardizer is not None else x_o
    velocity = ConditionedVelocity(net, x_std, pos_x, pos_theta, grid_shape_theta, grid_shape_x, target)
    base = gp_base(pos_theta, gp_cfg, net.cfg.theta_channels, net.cfg.eta_dim)
    xi, eta = draw_samples(velocity, base, n_samples, ode_cfg, rng)
    if standardizer is not None:
        xi = standardizer.theta.inverse(xi)
        if eta is not None and standardizer.eta is not None:
            eta = standardizer.eta.inverse(eta)
    return xi, (eta if eta is not None else np.zeros((n_samples, 0)))


# ===================
# Log-Probability
# ===================

def _divergence(
    velocity: VelocityFn, t: float, xi: np.ndarray, eta: Optional[np.ndarray], cfg: OdeConfig,
) -> Tuple[np.ndarray, Optional[np.ndarray], float]:
    """Velocity and its divergence w.r.t. the joint state at a single point"""
    n_xi = xi.size
    dim = n_xi + (eta.size if eta is not None else 0)
    exact = cfg.divergence == "exact" or (cfg.divergence == "auto" and dim <= cfg.exact_max_dim)
    if exact:
        cotangents = np.eye(dim)
    else:
        probe_rng = np.random.default_rng(cfg.probe_seed)
        cotangents = probe_rng.choice([-1.0, 1.0], size=(cfg.n_probes, dim))
    rows = cotangents.shape[0]
    xi_rep = Tensor(np.repeat(xi[None], rows, axis=0), requires_grad=True)
    eta_rep = Tensor(np.repeat(eta[None], rows, axis=0), requires_grad=True) if eta is not None else None
    v_xi, v_eta = velocity(t, xi_rep, eta_rep)

    inputs = [xi_rep] + ([eta_rep] if eta_rep is not None else [])
    g_xi = cotangents[:, :n_xi].reshape(v_xi.shape)
    total = vjp(v_xi, inputs, g_xi)
    if v_eta is not None:
        extra = vjp(v_eta, inputs, cotangents[:, n_xi:])
        total = [a + b for a, b in zip(total, extra)]
    flat = np.concatenate([g.reshape(rows, -1) for g in total], axis=1)  # rows of c^T J
    div = float(np.mean(np.sum(flat * cotangents, axis=1))) * (1.0 if not exact else rows)
    v_eta_data = v_eta.data[0] if v_eta is not None else None
    return v_xi.data[0], v_eta_data, div


def flow_log_prob(
    velocity: VelocityFn, base: BaseDistribution, xi0: np.ndarray, eta0: Optional[np.ndarray], cfg: OdeConfig,
) -> float:
    """log q(xi0, eta0) in the standardized space: log p_base(state at t=1) + integral of div v"""
    n = cfg.n_steps
    h = 1.0 / n
    xi, eta = np.asarray(xi0, dtype=get_dtype()), (None if eta0 is None or np.size(eta0) == 0 else np.asarray(eta0, dtype=get_dtype()))
    div_integral = 0.0
    for k in range(n):
        t = k * h
        t_eval = h if k == 0 else t
        v_xi, v_eta, div = _divergence(velocity, t_eval, xi, eta, cfg)
        if cfg.scheme == "heun":
            xi_pred = xi + h * v_xi
            eta_pred = eta + h * v_eta if eta is not None else None
            w_xi, w_eta, div_end = _divergence(velocity, t + h, xi_pred, eta_pred, cfg)
            xi = xi + 0.5 * h * (v_xi + w_xi)
            if eta is not None:
                eta = eta + 0.5 * h * (v_eta + w_eta)
            div_integral += 0.5 * h * (div + div_end)
        else:
            xi = xi + h * v_xi
            if eta is not None:
                eta = eta + h * v_eta
            div_integral += h * div
        _check(xi, k)
    base_term = base.log_density(xi[None], eta[None] if eta is not None else None)[0]
    return float(base_term + div_integral)


def log_prob(
    net: VelocityNet,
    theta: np.ndarray,
    eta: Optional[np.ndarray],
    x_o: np.ndarray,
    pos_x: np.ndarray,
    pos_theta: np.ndarray,
    ode_cfg: OdeConfig,
    gp_cfg: GPConfig,
    standardizer: Optional[Standardizer] = None,
    target: str = "rectified",
    grid_shape_theta=None,
    grid_shape_x=None,
) -> float:
    """
    Posterior log-density of (theta, eta) given x_o, in the original parameter space

    Raises:
        FactorizationError: the base covariance on pos_theta cannot be factorized
    """
    n_points = np.asarray(pos_theta).shape[0]
    xi0, eta0, x_std, log_jac = theta, eta, x_o, 0.0
    if standardizer is not None:
        xi0 = standardizer.theta.forward(theta)
        x_std = standardizer.x.forward(x_o)
        log_jac -= standardizer.theta.log_scale(n_points)
        if eta is not None and np.size(eta) and standardizer.eta is not None:
            eta0 = standardizer.eta.forward(eta)
            log_jac -= standardizer.eta.log_scale()
    velocity = ConditionedVelocity(net, x_std, pos_x, pos_theta, grid_shape_theta, grid_shape_x, target)
    base = gp_base(pos_theta, gp_cfg, net.cfg.theta_channels, net.cfg.eta_dim)
    if net.cfg.eta_dim == 0:
        eta0 = None
    return flow_log_prob(velocity, base, xi0, eta0, ode_cfg) + log_jac
