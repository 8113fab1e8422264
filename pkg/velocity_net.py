"""
Velocity Network
FNO-based conditional velocity field over function-valued and vector-valued parameters

Inputs are channels-last batches: xi_t (B, N_theta, C_theta), observations
(B, N_x, C_x), positions (B, N, D), eta_t (B, E).
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from archive import SimulationArchive, read_archive, write_archive
from autodiff import (
    Parameter, Tensor, as_tensor, complex_mul, concat, gelu, get_dtype, get_precision, matmul, no_grad,
    reshape, transpose,
)
from config import VelocityNetConfig
from errors import DomainError, ShapeError
from layers import MLP, FourierTimeEmbedding, Linear, Module, check_finite
from spectral import SpectralOperator, make_operator, n_modes

logger = logging.getLogger(__name__)


# ===================
# FNO Block
# ===================

@dataclass(eq=False)
class FnoBlockParams:
    R: Parameter     # (K, C, C, 2) complex channel mixing per retained mode
    W: Parameter     # (C, C) pointwise path
    bias: Parameter  # (C,)


class FnoBlock(Module):

    def __init__(self, channels: int, n_mode_count: int, rng: np.random.Generator):
        super().__init__()
        bound = 1.0 / np.sqrt(channels)
        std = 1.0 / np.sqrt(channels * n_mode_count)
        self.params = FnoBlockParams(
            R=self.param("R", rng.normal(0.0, std, size=(n_mode_count, channels, channels, 2))),
            W=self.param("W", rng.uniform(-bound, bound, size=(channels, channels))),
            bias=self.param("bias", rng.uniform(-bound, bound, size=channels)),
        )


def fno_block(
    a: Tensor, params: FnoBlockParams, op: SpectralOperator, activation: Callable[[Tensor], Tensor] = gelu,
) -> Tensor:
    """
    sigma(W a + K a) with K a = inverse(R . forward(a)) on the truncated modes

    Args:
        a: (B, N, C) block input
        params: block weights
        op: transform pair built for a's discretization
        activation: nonlinearity (identity for tests)
    """
    a = as_tensor(a)
    if a.shape[-1] != params.W.shape[0]:
        raise ShapeError("fno_block", a.shape, params.W.shape, "input channels")
    if a.shape[1] != op.n_points:
        raise DomainError(f"block input has {a.shape[1]} points but the transform was built for {op.n_points}")
    spectrum = transpose(op.analysis(a), (1, 0, 2, 3))        # (K, B, C, 2)
    mixed = transpose(complex_mul(spectrum, params.R), (1, 0, 2, 3))
    return activation(op.synthesis(mixed) + matmul(a, params.W) + params.bias)


# ===================
# Conditioning
# ===================

@dataclass(eq=False)
class Conditioning:
    """Per-batch quantities that do not depend on t, xi_t or eta_t"""
    pos_theta: np.ndarray
    pos_x: np.ndarray
    x_aligned: np.ndarray    # (B, N_theta, C_x)
    x_spectrum: np.ndarray   # (B, K, C_x, 2)
    op_theta: SpectralOperator

    @property
    def batch_size(self) -> int:
        return self.pos_theta.shape[0]

    @property
    def n_points(self) -> int:
        return self.pos_theta.shape[1]


class VelocityNet(Module):
    """
    Stacked FNO blocks with position, time and eta embeddings

    The final block output is projected to one velocity channel per parameter
    channel; when eta_dim > 0 an MLP head reads the truncated spectra of the
    final block and of the aligned observation together with eta_t and the
    time embedding.
    """

    def __init__(self, cfg: VelocityNetConfig, dim: int, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.dim = dim
        self.n_mode_count = n_modes(cfg.modes, dim)
        c = cfg.channels

        self.context = self.child("context", Linear(cfg.theta_channels + cfg.x_channels, cfg.context_channels, rng))
        self.pos_embed = None
        if cfg.pos_embed_channels > 0:
            self.pos_embed = self.child("pos_embed", MLP([dim, cfg.pos_embed_width, cfg.pos_embed_channels], rng))
        self.time_embed = self.child(
            "time_embed", FourierTimeEmbedding(cfg.time_features, cfg.time_embed_channels, cfg.time_feature_scale, rng)
        )
        self.eta_embed = None
        if cfg.eta_dim > 0:
            self.eta_embed = self.child(
                "eta_embed", MLP([cfg.eta_dim, cfg.eta_embed_width, cfg.eta_embed_channels], rng)
            )

        self.lift = self.child("lift", Linear(self.embed_channels, c, rng))
        self.block_cond = []
        if cfg.embed_every_block:
            self.block_cond = [
                self.child(f"block_cond{i}", Linear(self.cond_channels, c, rng)) for i in range(1, cfg.n_blocks)
            ]
        self.blocks = [self.child(f"block{i}", FnoBlock(c, self.n_mode_count, rng)) for i in range(cfg.n_blocks)]
        self.projection = self.child("projection", Linear(c, cfg.theta_channels, rng, zero=True))

        if cfg.eta_dim > 0:
            width = cfg.spectral_feature_width
            self.theta_features = self.child("theta_features", Linear(self.n_mode_count * c * 2, width, rng))
            self.obs_features = self.child(
                "obs_features", Linear(self.n_mode_count * cfg.x_channels * 2, width, rng)
            )
            head_in = 2 * width + cfg.eta_dim + cfg.time_embed_channels
            self.eta_head = self.child("eta_head", MLP([head_in, cfg.head_width, cfg.eta_dim], rng, zero_last=True))

        logger.debug(f"VelocityNet with {self.parameter_count()} trainable parameters")

    @property
    def cond_channels(self) -> int:
        eta = self.cfg.eta_embed_channels if self.cfg.eta_dim > 0 else 0
        return self.cfg.pos_embed_channels + self.cfg.time_embed_channels + eta

    @property
    def embed_channels(self) -> int:
        return self.cfg.context_channels + self.cond_channels

    def condition(
        self,
        x_o: np.ndarray,
        pos_x: np.ndarray,
        pos_theta: np.ndarray,
        grid_shape_theta: Optional[Tuple[int, ...]] = None,
        grid_shape_x: Optional[Tuple[int, ...]] = None,
    ) -> Conditioning:
        """
        Build transforms and align the observation to pos_theta

        Alignment is spectral resampling (forward transform on pos_x, inverse
        evaluation on pos_theta); the FFT path uses x directly when both
        discretizations coincide.
        """
        x_o = np.asarray(x_o, dtype=get_dtype())
        pos_x = np.asarray(pos_x, dtype=np.float64)
        pos_theta = np.asarray(pos_theta, dtype=np.float64)
        if pos_theta.shape[1] == 0 or pos_x.shape[1] == 0:
            raise DomainError("empty discretization")
        if x_o.shape[:2] != pos_x.shape[:2]:
            raise ShapeError("condition", x_o.shape, pos_x.shape, "observation/position length mismatch")
        if x_o.shape[-1] != self.cfg.x_channels:
            raise ShapeError("condition", x_o.shape, (self.cfg.x_channels,), "observation channels")

        transform = self.cfg.transform
        op_theta = make_operator(pos_theta, self.cfg.modes, transform, grid_shape_theta)
        same_grid = pos_x.shape == pos_theta.shape and np.array_equal(pos_x, pos_theta)
        op_x = op_theta if same_grid else make_operator(pos_x, self.cfg.modes, transform, grid_shape_x)
        with no_grad():
            x_spectrum = op_x.analysis(Tensor(x_o)).data
            if transform == "fft" and same_grid:
                x_aligned = x_o
            else:
                x_aligned = op_theta.synthesis(Tensor(x_spectrum)).data
        return Conditioning(pos_theta, pos_x, x_aligned, x_spectrum, op_theta)

    def _broadcast(self, v: Tensor, n_points: int) -> Tensor:
        """(B, F) -> (B, N, F)"""
        b, f = v.shape
        return matmul(np.ones((b, n_points, 1), dtype=get_dtype()), reshape(v, (b, 1, f)))

    def embed_context(
        self, t: np.ndarray, xi_t, eta_t, cond: Conditioning,
    ) -> Tuple[Tensor, Optional[Tensor], Tensor]:
        """
        Channels on pos_theta: lifted [xi_t, aligned x], position embedding,
        broadcast time embedding and broadcast eta embedding

        Returns:
            (embedding (B, N, embed_channels), conditioning channels or None, time embedding (B, T))
        """
        xi_t = as_tensor(xi_t)
        b, n = cond.batch_size, cond.n_points
        if xi_t.shape[:2] != (b, n):
            raise ShapeError("embed_context", xi_t.shape, cond.pos_theta.shape, "xi_t must live on pos_theta")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (b,))

        context = self.context(concat([xi_t, Tensor(cond.x_aligned)], axis=-1))
        parts = []
        if self.pos_embed is not None:
            parts.append(self.pos_embed(Tensor(cond.pos_theta)))
        temb = self.time_embed(t)
        parts.append(self._broadcast(temb, n))
        if self.eta_embed is not None:
            if eta_t is None:
                raise ShapeError("embed_context", (b, 0), (b, self.cfg.eta_dim), "eta_t required")
            parts.append(self._broadcast(self.eta_embed(as_tensor(eta_t)), n))
        cond_channels = concat(parts, axis=-1) if len(parts) > 1 else parts[0]
        return concat([context, cond_channels], axis=-1), cond_channels, temb

    def forward(
        self, t: np.ndarray, xi_t, eta_t, cond: Conditioning,
        activation: Callable[[Tensor], Tensor] = gelu,
    ) -> Tuple[Tensor, Optional[Tensor]]:
        """(v_theta (B, N, C_theta), v_eta (B, E) or None)"""
        embedded, cond_channels, temb = self.embed_context(t, xi_t, eta_t, cond)
        h = check_finite(self.lift(check_finite(embedded, "embedding")), "lift")
        for i, block in enumerate(self.blocks):
            if i > 0 and self.block_cond:
                h = h + self.block_cond[i - 1](cond_channels)
            h = check_finite(fno_block(h, block.params, cond.op_theta, activation), f"block{i}")
        v_theta = check_finite(self.projection(h), "projection")
        if self.cfg.eta_dim == 0:
            return v_theta, None

        b = cond.batch_size
        spec = reshape(cond.op_theta.analysis(h), (b, -1))
        theta_feat = self.theta_features(spec)
        obs_feat = self.obs_features(Tensor(cond.x_spectrum.reshape(b, -1)))
        head_in = concat([theta_feat, obs_feat, as_tensor(eta_t), temb], axis=-1)
        return v_theta, check_finite(self.eta_head(head_in), "eta_head")


def embed_context(net: VelocityNet, t, xi_t, pos_theta, pos_x, eta_t, x_o) -> Tensor:
    cond = net.condition(x_o, pos_x, pos_theta)
    return net.embed_context(t, xi_t, eta_t, cond)[0]


def velocity_forward(
    net: VelocityNet, t, xi_t, x_o, pos_theta, pos_x, eta_t=None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Evaluate the velocity on a batch

    Returns:
        v_theta on exactly pos_theta, and v_eta ((B, 0) when eta_dim = 0)
    """
    cond = net.condition(x_o, pos_x, pos_theta)
    with no_grad():
        v_theta, v_eta = net.forward(t, xi_t, eta_t, cond)
    b = cond.batch_size
    return v_theta.data, (np.zeros((b, 0)) if v_eta is None else v_eta.data)


# ===================
# Checkpoints
# ===================

def save_checkpoint(
    module: Module, path: str, kind: str, config: Dict, dim: int, metadata: Optional[Dict] = None,
) -> None:
    """Weights as archive arrays; config, precision and training metadata in the manifest"""
    meta = {"model": kind, "config": config, "dim": dim, "precision": get_precision()}
    meta.update(metadata or {})
    archive = SimulationArchive(arrays=module.state_dict(), kind="checkpoint", meta=meta)
    write_archive(path, archive)


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], Dict]:
    archive = read_archive(path)
    if archive.kind != "checkpoint":
        raise DomainError(f"{path} holds a '{archive.kind}' archive, not a checkpoint")
    return archive.arrays, archive.meta
