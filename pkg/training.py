"""
Flow-Matching Training
Standardization, augmentation, the flow-matching objective and the Adam training loop
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from autodiff import Tensor, as_tensor, get_dtype, grad, mean, no_grad, square, sum_
from config import GPConfig, TrainConfig
from data import Discretization, SimulationRecord, SimulationSet
from errors import DomainError, TrainingDivergedError
from gp_noise import gp_factor
from layers import Module
from velocity_net import VelocityNet

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8


# ===================
# Standardization
# ===================

@dataclass
class Scaler:
    """Affine map z = (v - mean) / std over the trailing axis"""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Scaler":
        values = np.asarray(values, dtype=np.float64)
        flat = values.reshape(-1, values.shape[-1])
        if flat.shape[0] == 0:
            return cls(np.zeros(values.shape[-1]), np.ones(values.shape[-1]))
        return cls(flat.mean(axis=0), np.maximum(flat.std(axis=0), STD_FLOOR))

    def forward(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def log_scale(self, n_points: int = 1) -> float:
        """sum of log std over n_points copies of the trailing axis"""
        return float(n_points * np.sum(np.log(self.std)))


@dataclass
class Standardizer:
    """Per-channel scalers for theta, x and eta fitted on the training split"""
    theta: Scaler
    x: Scaler
    eta: Optional[Scaler] = None

    @classmethod
    def fit(cls, data: SimulationSet) -> "Standardizer":
        eta = Scaler.fit(data.eta) if data.eta_dim > 0 else None
        return cls(Scaler.fit(data.theta), Scaler.fit(data.x), eta)

    def apply(self, data: SimulationSet) -> SimulationSet:
        eta = self.eta.forward(data.eta) if self.eta is not None else data.eta
        return SimulationSet(data.pos_theta, self.theta.forward(data.theta), data.pos_x, self.x.forward(data.x), eta)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        out = {"std_theta_mean": self.theta.mean, "std_theta_std": self.theta.std,
               "std_x_mean": self.x.mean, "std_x_std": self.x.std}
        if self.eta is not None:
            out.update({"std_eta_mean": self.eta.mean, "std_eta_std": self.eta.std})
        return out

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "Standardizer":
        eta = None
        if "std_eta_mean" in arrays:
            eta = Scaler(np.asarray(arrays["std_eta_mean"]), np.asarray(arrays["std_eta_std"]))
        return cls(
            Scaler(np.asarray(arrays["std_theta_mean"]), np.asarray(arrays["std_theta_std"])),
            Scaler(np.asarray(arrays["std_x_mean"]), np.asarray(arrays["std_x_std"])),
            eta,
        )


# ===================
# Augmentation
# ===================

def _subsample(pos: np.ndarray, values: np.ndarray, n_ds: int, rng: np.random.Generator):
    n = pos.shape[0]
    if n_ds < n:
        keep = np.sort(rng.choice(n, size=n_ds, replace=False))
        pos, values = pos[keep], values[keep]
    return pos, values


def augment(record: SimulationRecord, cfg: TrainConfig, rng: np.random.Generator) -> SimulationRecord:
    """
    Random masking to exactly N_ds points per side plus clamped positional noise

    Surviving points keep their relative order; a side with N <= N_ds keeps all points.
    """
    pos_theta, theta = _subsample(record.pos_theta, record.theta, cfg.n_ds, rng)
    pos_x, x = _subsample(record.pos_x, record.x, cfg.n_ds, rng)
    if cfg.pos_noise_std > 0:
        pos_theta = np.clip(pos_theta + rng.normal(0.0, cfg.pos_noise_std, pos_theta.shape), 0.0, 1.0)
        pos_x = np.clip(pos_x + rng.normal(0.0, cfg.pos_noise_std, pos_x.shape), 0.0, 1.0)
    return SimulationRecord(pos_theta, theta, pos_x, x, record.eta)


def augment_batch(batch: SimulationSet, cfg: TrainConfig, rng: np.random.Generator) -> SimulationSet:
    return SimulationSet.from_records([augment(r, cfg, rng) for r in batch])


# ===================
# Objective
# ===================

def fm_target(theta: np.ndarray, eps: np.ndarray, t, target: str = "rectified") -> np.ndarray:
    """Conditional velocity eps - theta; 'literal' gives t (eps - theta) = xi_t - theta"""
    u = eps - theta
    if target == "literal":
        t = np.asarray(t, dtype=np.float64)
        return t.reshape(t.shape + (1,) * (u.ndim - t.ndim)) * u
    if target != "rectified":
        raise DomainError(f"unknown target '{target}'")
    return u


@dataclass(eq=False)
class FlowBatch:
    """Noised inputs and regression targets for one batch"""
    t: np.ndarray        # (B,)
    xi: np.ndarray       # (B, N, C)
    eps: np.ndarray
    u_theta: np.ndarray
    eta_t: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None
    u_eta: Optional[np.ndarray] = None


def draw_flow_batch(
    batch: SimulationSet, gp_cfg: GPConfig, rng: np.random.Generator, target: str = "rectified",
) -> FlowBatch:
    """Per-record t ~ U[0,1], GP noise on each record's pos_theta and N(0, I) noise for eta"""
    b, n, c = batch.theta.shape
    t = rng.uniform(0.0, 1.0, size=b)
    shared = bool(np.all(batch.pos_theta == batch.pos_theta[:1]))
    if shared:
        factor = gp_factor(Discretization(batch.pos_theta[0]), gp_cfg)
        eps = factor.matvec(rng.standard_normal((b, n, c)))
    else:
        eps = np.empty((b, n, c))
        for i in range(b):
            factor = gp_factor(Discretization(batch.pos_theta[i]), gp_cfg, use_cache=False)
            eps[i] = factor.matvec(rng.standard_normal((1, n, c)))[0]
    tt = t[:, None, None]
    xi = (1.0 - tt) * batch.theta + tt * eps
    flow = FlowBatch(t, xi, eps, fm_target(batch.theta, eps, t, target))
    if batch.eta_dim > 0:
        z = rng.standard_normal(batch.eta.shape)
        flow.eta_t = (1.0 - t[:, None]) * batch.eta + t[:, None] * z
        flow.z = z
        flow.u_eta = fm_target(batch.eta, z, t, target)
    return flow


def flow_matching_loss(v_theta, u_theta: np.ndarray, v_eta=None, u_eta: Optional[np.ndarray] = None) -> Tensor:
    """
    mean over the batch of (1/N_theta)||v_theta - u_theta||^2 + (1/N_eta)||v_eta - u_eta||^2

    The eta term is dropped when v_eta is None.
    """
    n = u_theta.shape[1]
    per_record = sum_(square(as_tensor(v_theta) - Tensor(u_theta)), axis=(1, 2)) * (1.0 / n)
    if v_eta is not None:
        per_record = per_record + mean(square(as_tensor(v_eta) - Tensor(u_eta)), axis=1)
    return mean(per_record)


def fm_loss(
    net: VelocityNet,
    batch: SimulationSet,
    gp_cfg: GPConfig,
    rng: np.random.Generator,
    target: str = "rectified",
    grid_shape: Optional[Tuple[int, ...]] = None,
    grid_shape_x: Optional[Tuple[int, ...]] = None,
) -> Tensor:
    """Flow-matching loss of the FNO velocity on a standardized (and augmented) batch"""
    flow = draw_flow_batch(batch, gp_cfg, rng, target)
    cond = net.condition(batch.x, batch.pos_x, batch.pos_theta, grid_shape, grid_shape_x)
    eta_t = flow.eta_t if net.cfg.eta_dim > 0 else None
    v_theta, v_eta = net.forward(flow.t, flow.xi.astype(get_dtype()), eta_t, cond)
    return flow_matching_loss(v_theta, flow.u_theta, v_eta, flow.u_eta if v_eta is not None else None)


# ===================
# Optimization
# ===================

class Adam:
    """Adam with bias correction over a fixed parameter list"""

    def __init__(self, params: List[Tensor], learning_rate: float,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, grads: List[np.ndarray]) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            update = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)


def split_indices(n_records: int, cfg: TrainConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded (train, validation) split, fixed before any augmentation"""
    if n_records < 2:
        raise DomainError(f"training needs at least 2 records, got {n_records}")
    perm = np.random.default_rng(cfg.seed).permutation(n_records)
    n_val = int(min(max(1, round(cfg.val_fraction * n_records)), n_records - 1))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


@dataclass
class TrainResult:
    net: Module
    history: pd.DataFrame
    best_epoch: int
    best_val_loss: float
    stopped_early: bool = False
    metadata: Dict[str, Any] = field(default_factory=dict)


def save_history(history: pd.DataFrame, path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    history.to_csv(path, index=False, float_format="%.17g")


def _loss_over(dataset, loss_fn, batch_size: int, rng: np.random.Generator) -> float:
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = np.arange(start, min(start + batch_size, len(dataset)))
            loss = loss_fn(dataset.take(idx), rng)
            total += float(loss.data) * len(idx)
            count += len(idx)
    return total / max(count, 1)


def train(
    net: Module,
    dataset,
    cfg: TrainConfig,
    gp_cfg: Optional[GPConfig] = None,
    loss_fn: Optional[Callable[[Any, np.random.Generator], Tensor]] = None,
) -> TrainResult:
    """
    Adam with a held-out validation loss and early stopping

    Args:
        net: network whose trainable parameters are optimized in place
        dataset: standardized records supporting len() and take(indices)
        cfg: training settings
        gp_cfg: noise process for the default FNO loss
        loss_fn: (batch, rng) -> scalar loss; defaults to fm_loss with augmentation per cfg

    Returns:
        TrainResult holding the best-validation weights (loaded into net) and the history

    Raises:
        TrainingDivergedError: non-finite loss; carries the weights of the last completed epoch
    """
    if len(dataset) == 0:
        raise DomainError("dataset is empty")
    if loss_fn is None:
        if gp_cfg is None:
            raise DomainError("gp_cfg is required for the default flow-matching loss")

        def loss_fn(batch, rng):
            if cfg.augment:
                batch = augment_batch(batch, cfg, rng)
            return fm_loss(net, batch, gp_cfg, rng, cfg.target)

    train_idx, val_idx = split_indices(len(dataset), cfg)
    train_set, val_set = dataset.take(train_idx), dataset.take(val_idx)
    params = net.parameters()
    optimizer = Adam(params, cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 1])

    best_val, best_epoch, best_state = np.inf, -1, net.state_dict()
    last_good = net.state_dict()
    rows, wait, stopped_early = [], 0, False
    start_time = time.perf_counter()
    logger.info(f"Training on {len(train_set)} records ({len(val_set)} held out), {len(params)} parameter arrays")

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train_set))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = loss_fn(train_set.take(idx), rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite training loss at epoch {epoch}", checkpoint=last_good, epoch=epoch
                )
            optimizer.step(grad(loss, params))
            total += value * len(idx)
        train_loss = total / len(train_set)

        val_loss = _loss_over(val_set, loss_fn, cfg.batch_size, np.random.default_rng([cfg.seed, 2]))
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}", checkpoint=last_good, epoch=epoch)
        last_good = net.state_dict()
        rows.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                     "wall_time": time.perf_counter() - start_time})
        logger.info(f"Epoch {epoch}: train_loss={train_loss:.6f} val_loss={val_loss:.6f}")

        if val_loss < best_val:
            best_val, best_epoch, best_state, wait = val_loss, epoch, last_good, 0
        else:
            wait += 1
            if wait > cfg.patience:
                stopped_early = True
                logger.info(f"Early stopping at epoch {epoch} (best epoch {best_epoch})")
                break

    net.load_state_dict(best_state)
    history = pd.DataFrame(rows, columns=["epoch", "train_loss", "val_loss", "wall_time"])
    return TrainResult(net, history, best_epoch, float(best_val), stopped_early)
