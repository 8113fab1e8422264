"""
Estimators
The four posterior estimators behind one interface: FNOPE, FNOPE (fixed discretization),
FMPE on raw grid values and FMPE on spectral coefficients
"""

import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Callable, ClassVar, Dict, List, Optional, Tuple, Type

import numpy as np

from archive import SimulationArchive, read_archive, write_archive
from autodiff import Tensor, get_dtype, reshape
from baselines import BaselineVelocity
from config import ExperimentConfig, GPConfig, build_config
from data import Discretization, SimulationSet
from errors import DomainError, NonUniformGridError, UnknownNameError
from gp_noise import default_noise_config, gp_log_density, standard_normal_log_density
from sampler import draw_samples, flow_log_prob, log_prob, sample_posterior, white_base
from simulators import Task, get_task
from spectral import SpectralPreprocessor
from training import Scaler, Standardizer, TrainResult, augment_batch, flow_matching_loss, fm_loss, fm_target, train
from velocity_net import VelocityNet, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

METHODS: Dict[str, Type["Estimator"]] = {}


def register_method(*names: str) -> Callable[[Type["Estimator"]], Type["Estimator"]]:
    def decorator(cls: Type["Estimator"]) -> Type["Estimator"]:
        for name in names:
            METHODS[name] = cls
        return cls
    return decorator


def list_methods() -> List[str]:
    return sorted(METHODS)


def get_estimator(cfg: ExperimentConfig, task: Optional[Task] = None, seed: int = 0) -> "Estimator":
    """
    Build the estimator named by cfg.method

    Raises:
        UnknownNameError: cfg.method is not registered
    """
    if cfg.method not in METHODS:
        raise UnknownNameError("method", cfg.method, list_methods())
    task = task if task is not None else get_task(cfg.task, **cfg.task_options)
    return METHODS[cfg.method](cfg, task, seed)


class Estimator(ABC):
    """Fit on simulations, then sample posteriors and (where defined) evaluate log-densities"""
    supports_log_prob: ClassVar[bool] = True
    # True when sampling only works on the training discretization
    fixed_discretization: ClassVar[bool] = True

    def __init__(self, cfg: ExperimentConfig, task: Task, seed: int = 0):
        self.cfg = cfg
        self.task = task
        self.seed = seed
        self.train_result: Optional[TrainResult] = None

    @abstractmethod
    def fit(self, data: SimulationSet) -> TrainResult:
        ...

    @abstractmethod
    def sample(
        self, x_o: np.ndarray, pos_x: np.ndarray, pos_theta: np.ndarray, n_samples: int, rng: np.random.Generator,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """(theta (S, N_theta, C_theta), eta (S, E)) in the original parameter space"""

    def log_prob(
        self, theta: np.ndarray, eta: np.ndarray, x_o: np.ndarray, pos_x: np.ndarray, pos_theta: np.ndarray,
    ) -> float:
        raise DomainError(f"{self.cfg.method} does not define log-probabilities of grid parameters")

    @abstractmethod
    def scaler_arrays(self) -> Dict[str, np.ndarray]:
        ...

    @abstractmethod
    def load_scalers(self, arrays: Dict[str, np.ndarray]) -> None:
        ...

    def _train_cfg(self):
        return self.cfg.train.model_copy(update={"seed": self.cfg.train.seed + self.seed})

    # ===================
    # Persistence
    # ===================

    def save(self, directory: str) -> Path:
        """Weights under model/, scalers under scalers/, both archive directories"""
        out = Path(directory)
        meta = {"method": self.cfg.method, "seed": self.seed}
        if self.train_result is not None:
            meta.update({"best_epoch": self.train_result.best_epoch, "best_val_loss": self.train_result.best_val_loss})
        save_checkpoint(self.net, str(out / "model"), self.cfg.method, self.cfg.model_dump(mode="json"),
                        self.task.dim, meta)
        write_archive(str(out / "scalers"), SimulationArchive(self.scaler_arrays(), kind="scalers",
                                                              task=self.cfg.task, seed=self.seed))
        logger.info(f"Saved {self.cfg.method} estimator to {out}")
        return out


def load_estimator(directory: str) -> Estimator:
    """Rebuild an estimator from save() output"""
    state, meta = load_checkpoint(str(Path(directory) / "model"))
    cfg = build_config(meta["config"])
    estimator = get_estimator(cfg, seed=int(meta.get("seed", 0)))
    estimator.net.load_state_dict(state)
    estimator.load_scalers(read_archive(str(Path(directory) / "scalers")).arrays)
    return estimator


# ===================
# FNOPE
# ===================

@register_method("fnope", "fnope_fix")
class FnopeEstimator(Estimator):
    """FNO velocity on function-valued parameters with a GP base distribution"""
    fixed_discretization = False

    def __init__(self, cfg: ExperimentConfig, task: Task, seed: int = 0):
        super().__init__(cfg, task, seed)
        self.net_cfg = cfg.net.model_copy(update={
            "theta_channels": task.theta_channels, "x_channels": task.x_channels, "eta_dim": task.eta_dim,
        })
        self.gp_cfg: GPConfig = cfg.gp if cfg.gp is not None else default_noise_config(cfg.net.modes)
        self.net = VelocityNet(self.net_cfg, task.dim, np.random.default_rng([cfg.train.seed, seed, 7]))
        self.standardizer: Optional[Standardizer] = None
        if self.net_cfg.transform == "fft":
            self.fixed_discretization = True

    def _grid_shapes(self, pos_theta: np.ndarray, pos_x: np.ndarray):
        if self.net_cfg.transform != "fft":
            return None, None
        theta_disc, x_disc = self.task.theta_discretization(), self.task.x_discretization()
        if not (np.array_equal(pos_theta, theta_disc.positions) and np.array_equal(pos_x, x_disc.positions)):
            raise NonUniformGridError("the fixed-discretization FNO only runs on the task grid")
        return theta_disc.grid_shape, x_disc.grid_shape

    def fit(self, data: SimulationSet) -> TrainResult:
        self.standardizer = Standardizer.fit(data)
        scaled = self.standardizer.apply(data)
        cfg = self._train_cfg()
        grid_shapes = self._grid_shapes(data.pos_theta[0], data.pos_x[0])

        def loss_fn(batch, rng):
            if cfg.augment:
                batch = augment_batch(batch, cfg, rng)
            return fm_loss(self.net, batch, self.gp_cfg, rng, cfg.target, *grid_shapes)

        self.train_result = train(self.net, scaled, cfg, self.gp_cfg, loss_fn)
        return self.train_result

    def sample(self, x_o, pos_x, pos_theta, n_samples, rng):
        grid_theta, grid_x = self._grid_shapes(pos_theta, pos_x)
        return sample_posterior(
            self.net, x_o, pos_x, pos_theta, n_samples, self.gp_cfg, self.cfg.ode, rng,
            self.standardizer, self.cfg.train.target, grid_theta, grid_x,
        )

    def log_prob(self, theta, eta, x_o, pos_x, pos_theta) -> float:
        grid_theta, grid_x = self._grid_shapes(pos_theta, pos_x)
        return log_prob(
            self.net, theta, eta, x_o, pos_x, pos_theta, self.cfg.ode, self.gp_cfg, self.standardizer,
            self.cfg.train.target, grid_theta, grid_x,
        )

    def base_log_prob(self, theta: np.ndarray, eta: Optional[np.ndarray], pos_theta: np.ndarray) -> float:
        """Zero-velocity reference: the base density of the standardized parameters, mapped back"""
        s = self.standardizer
        value = gp_log_density(s.theta.forward(theta), Discretization(pos_theta), self.gp_cfg)[0]
        value -= s.theta.log_scale(np.asarray(pos_theta).shape[0])
        if self.task.eta_dim > 0 and s.eta is not None:
            value += standard_normal_log_density(s.eta.forward(eta))[0] - s.eta.log_scale()
        return float(value)

    def scaler_arrays(self):
        return self.standardizer.to_arrays()

    def load_scalers(self, arrays):
        self.standardizer = Standardizer.from_arrays(arrays)


# ===================
# FMPE Baselines
# ===================

class BaselineConditionedVelocity:
    """Baseline velocity for one observation; states are (S, P, 1) flat parameter vectors"""

    def __init__(self, net: BaselineVelocity, x_flat: np.ndarray, target: str = "rectified"):
        self.net = net
        self.embedding = net.embed(Tensor(np.asarray(x_flat, dtype=get_dtype())[None])).data
        self.target = target

    def __call__(self, t: float, xi: Tensor, eta: Optional[Tensor]):
        s, p, _ = xi.shape
        emb = Tensor(np.broadcast_to(self.embedding, (s, self.embedding.shape[1])))
        v = reshape(self.net.forward(np.full(s, t), reshape(xi, (s, p)), emb), (s, p, 1))
        if self.target == "literal":
            v = v * (1.0 / t)
        return v, None


@register_method("fmpe_raw", "fmpe_spectral")
class FmpeEstimator(Estimator):
    """
    MLP flow over flat parameter vectors with an MLP/CNN observation embedding and
    white-noise base; 'fmpe_spectral' infers truncated Fourier coefficients instead of grid values
    """

    def __init__(self, cfg: ExperimentConfig, task: Task, seed: int = 0):
        super().__init__(cfg, task, seed)
        self.spectral = cfg.method == "fmpe_spectral"
        self.supports_log_prob = not self.spectral
        theta_disc, x_disc = task.theta_discretization(), task.x_discretization()
        self.theta_disc, self.x_disc = theta_disc, x_disc
        self.preprocessor = None
        if self.spectral:
            self.preprocessor = SpectralPreprocessor(theta_disc.grid_shape, cfg.baseline.modes, cfg.baseline.pad_width)
            theta_dim = self.preprocessor.output_dim * task.theta_channels
        else:
            theta_dim = theta_disc.n_points * task.theta_channels
        self.theta_dim = theta_dim
        self.param_dim = theta_dim + task.eta_dim
        obs_dim = x_disc.n_points * task.x_channels
        self.net = BaselineVelocity(
            self.param_dim, obs_dim, cfg.baseline, np.random.default_rng([cfg.train.seed, seed, 7]),
            x_disc.grid_shape if cfg.baseline.embedding == "cnn" else None, task.x_channels,
        )
        self.param_scaler: Optional[Scaler] = None
        self.x_scaler: Optional[Scaler] = None

    def _check_grid(self, pos_theta, pos_x) -> None:
        if not (np.array_equal(pos_theta, self.theta_disc.positions) and np.array_equal(pos_x, self.x_disc.positions)):
            raise NonUniformGridError(f"{self.cfg.method} only runs on the task grid")

    def encode(self, theta: np.ndarray, eta: np.ndarray) -> np.ndarray:
        """(K, N, C) grid parameters and (K, E) vectors -> (K, P) flat parameter vectors"""
        k = theta.shape[0]
        if self.spectral:
            parts = [self.preprocessor.forward(theta[..., c]) for c in range(theta.shape[2])]
            flat = np.concatenate(parts, axis=1)
        else:
            flat = theta.reshape(k, -1)
        return np.concatenate([flat, np.asarray(eta).reshape(k, -1)], axis=1)

    def decode(self, params: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        k = params.shape[0]
        flat, eta = params[:, : self.theta_dim], params[:, self.theta_dim:]
        channels = self.task.theta_channels
        if self.spectral:
            width = self.preprocessor.output_dim
            theta = np.stack([self.preprocessor.inverse(flat[:, c * width:(c + 1) * width]) for c in range(channels)],
                             axis=-1)
        else:
            theta = flat.reshape(k, -1, channels)
        return theta, eta

    def fit(self, data: SimulationSet) -> TrainResult:
        self._check_grid(data.pos_theta[0], data.pos_x[0])
        params = self.encode(data.theta, data.eta)
        self.param_scaler = Scaler.fit(params)
        self.x_scaler = Scaler.fit(data.x)
        # stored as (K, P, 1) thetas so the shared training loop can batch them
        scaled = SimulationSet(
            pos_theta=np.zeros((len(data), self.param_dim, 1)),
            theta=self.param_scaler.forward(params)[..., None],
            pos_x=data.pos_x,
            x=self.x_scaler.forward(data.x),
            eta=np.zeros((len(data), 0)),
        )
        cfg = self._train_cfg()
        target = cfg.target

        def loss_fn(batch, rng):
            b = len(batch)
            theta = batch.theta[..., 0]
            t = rng.uniform(0.0, 1.0, size=b)
            z = rng.standard_normal(theta.shape)
            psi = (1.0 - t[:, None]) * theta + t[:, None] * z
            emb = self.net.embed(Tensor(batch.x.reshape(b, -1).astype(get_dtype())))
            v = self.net.forward(t, Tensor(psi.astype(get_dtype())), emb)
            return flow_matching_loss(reshape(v, (b, self.param_dim, 1)), fm_target(theta, z, t, target)[..., None])

        self.train_result = train(self.net, scaled, cfg, loss_fn=loss_fn)
        return self.train_result

    def _velocity(self, x_o: np.ndarray) -> BaselineConditionedVelocity:
        return BaselineConditionedVelocity(self.net, self.x_scaler.forward(x_o).reshape(-1), self.cfg.train.target)

    def sample(self, x_o, pos_x, pos_theta, n_samples, rng):
        self._check_grid(pos_theta, pos_x)
        xi, _ = draw_samples(self._velocity(x_o), white_base(self.param_dim), n_samples, self.cfg.ode, rng)
        return self.decode(self.param_scaler.inverse(xi[..., 0]))

    def log_prob(self, theta, eta, x_o, pos_x, pos_theta) -> float:
        if self.spectral:
            return super().log_prob(theta, eta, x_o, pos_x, pos_theta)
        self._check_grid(pos_theta, pos_x)
        eta = np.zeros(0) if eta is None else eta
        params = self.param_scaler.forward(self.encode(np.asarray(theta)[None], np.asarray(eta)[None]))[0]
        value = flow_log_prob(self._velocity(x_o), white_base(self.param_dim), params[:, None], None, self.cfg.ode)
        return value - self.param_scaler.log_scale()

    def scaler_arrays(self):
        return {"param_mean": self.param_scaler.mean, "param_std": self.param_scaler.std,
                "x_mean": self.x_scaler.mean, "x_std": self.x_scaler.std}

    def load_scalers(self, arrays):
        self.param_scaler = Scaler(np.asarray(arrays["param_mean"]), np.asarray(arrays["param_std"]))
        self.x_scaler = Scaler(np.asarray(arrays["x_mean"]), np.asarray(arrays["x_std"]))
