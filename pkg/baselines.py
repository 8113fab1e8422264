"""
Baseline Networks
MLP flow networks over flat parameter vectors with MLP or CNN observation embeddings
"""

import logging
from typing import Optional, Tuple

import numpy as np

from autodiff import Tensor, as_tensor, concat, gather, gelu, get_dtype, matmul, mean, reshape
from config import BaselineConfig
from errors import ShapeError
from layers import MLP, Module

logger = logging.getLogger(__name__)


class MLPEmbedding(Module):
    """Flattened observation -> embed_dim"""

    def __init__(self, obs_dim: int, cfg: BaselineConfig, rng: np.random.Generator):
        super().__init__()
        self.obs_dim = obs_dim
        sizes = [obs_dim] + [cfg.embed_width] * (cfg.embed_layers - 1) + [cfg.embed_dim]
        self.mlp = self.child("mlp", MLP(sizes, rng))
        self.out_dim = cfg.embed_dim

    def __call__(self, x) -> Tensor:
        return self.mlp(x)


def _conv_indices(height: int, width: int, kernel: int) -> np.ndarray:
    """
    im2col gather indices for a 'same' convolution on a row-major grid

    Out-of-range taps point at index height * width, a zero row appended by the caller.
    """
    half = kernel // 2
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    offsets = np.arange(kernel) - half
    dr, dc = np.meshgrid(offsets, offsets, indexing="ij")
    r = rows.reshape(-1, 1) + dr.reshape(1, -1)
    c = cols.reshape(-1, 1) + dc.reshape(1, -1)
    inside = (r >= 0) & (r < height) & (c >= 0) & (c < width)
    return np.where(inside, r * width + c, height * width)


def _pool_indices(height: int, width: int) -> np.ndarray:
    """Row-major indices of each 2x2 window, shape (H/2 * W/2, 4)"""
    rows, cols = np.meshgrid(np.arange(height // 2) * 2, np.arange(width // 2) * 2, indexing="ij")
    base = (rows * width + cols).reshape(-1, 1)
    return base + np.array([0, 1, width, width + 1])[None, :]


class ConvPoolLayer(Module):
    """k x k 'same' convolution, GELU, then 2x2 average pooling"""

    def __init__(self, shape: Tuple[int, int], c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        super().__init__()
        self.shape = shape
        self.c_in = c_in
        fan_in = kernel * kernel * c_in
        bound = 1.0 / np.sqrt(fan_in)
        self.W = self.param("W", rng.uniform(-bound, bound, size=(fan_in, c_out)))
        self.b = self.param("b", rng.uniform(-bound, bound, size=c_out))
        self.taps = _conv_indices(shape[0], shape[1], kernel)
        self.pool = _pool_indices(shape[0], shape[1])
        self.out_shape = (shape[0] // 2, shape[1] // 2)

    def __call__(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        padded = concat([x, Tensor(np.zeros((b, 1, c), dtype=get_dtype()))], axis=1)
        cols = reshape(gather(padded, self.taps.reshape(-1), axis=1), (b, n, -1))
        h = gelu(matmul(cols, self.W) + self.b)
        k = self.pool.shape[0]
        windows = reshape(gather(h, self.pool.reshape(-1), axis=1), (b, k, 4, -1))
        return mean(windows, axis=2)


class CNNEmbedding(Module):
    """Image observation (B, H*W, C) -> conv/pool stack -> MLP -> embed_dim"""

    def __init__(self, grid_shape: Tuple[int, int], channels: int, cfg: BaselineConfig, rng: np.random.Generator):
        super().__init__()
        if len(grid_shape) != 2:
            raise ShapeError("CNNEmbedding", grid_shape, (0, 0), "CNN embedding needs a 2-D grid")
        self.grid_shape = tuple(grid_shape)
        self.channels = channels
        shape, c_in = self.grid_shape, channels
        self.convs = []
        for i in range(cfg.conv_layers):
            layer = self.child(f"conv{i}", ConvPoolLayer(shape, c_in, cfg.conv_channels, cfg.kernel_size, rng))
            self.convs.append(layer)
            shape, c_in = layer.out_shape, cfg.conv_channels
        if shape[0] < 1 or shape[1] < 1:
            raise ShapeError("CNNEmbedding", grid_shape, shape, "too many pooling layers for the grid")
        flat = shape[0] * shape[1] * c_in
        sizes = [flat] + [cfg.embed_width] * (cfg.embed_layers - 1) + [cfg.embed_dim]
        self.mlp = self.child("mlp", MLP(sizes, rng))
        self.out_dim = cfg.embed_dim

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        b = x.shape[0]
        h = reshape(x, (b, -1, self.channels))
        for conv in self.convs:
            h = conv(h)
        return self.mlp(reshape(h, (b, -1)))


class BaselineVelocity(Module):
    """
    v(t, theta_t, x): MLP over [theta_t, t, embedding(x)]

    The last layer is zero-initialized so the initial velocity is zero.
    """

    def __init__(
        self,
        param_dim: int,
        obs_dim: int,
        cfg: BaselineConfig,
        rng: np.random.Generator,
        grid_shape: Optional[Tuple[int, int]] = None,
        obs_channels: int = 1,
    ):
        super().__init__()
        self.param_dim = param_dim
        self.obs_dim = obs_dim
        if cfg.embedding == "cnn":
            if grid_shape is None:
                raise ShapeError("BaselineVelocity", (obs_dim,), (0, 0), "CNN embedding needs the observation grid")
            self.embedding = self.child("embedding", CNNEmbedding(grid_shape, obs_channels, cfg, rng))
        else:
            self.embedding = self.child("embedding", MLPEmbedding(obs_dim, cfg, rng))
        sizes = [param_dim + 1 + self.embedding.out_dim] + [cfg.hidden_width] * (cfg.n_layers - 1) + [param_dim]
        self.flow = self.child("flow", MLP(sizes, rng, zero_last=True))

    def embed(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.obs_dim:
            raise ShapeError("BaselineVelocity", x.shape, (x.shape[0], self.obs_dim), "observation dimension")
        return self.embedding(x)

    def forward(self, t: np.ndarray, theta_t, x_embedding: Tensor) -> Tensor:
        theta_t = as_tensor(theta_t)
        if theta_t.ndim != 2 or theta_t.shape[1] != self.param_dim:
            raise ShapeError("BaselineVelocity", theta_t.shape, (theta_t.shape[0], self.param_dim), "parameter dimension")
        b = theta_t.shape[0]
        times = Tensor(np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (b, 1)))
        return self.flow(concat([theta_t, times, x_embedding], axis=-1))


def baseline_mlp_velocity(
    cfg: BaselineConfig, param_dim: int, obs_dim: int, seed: int = 0,
    grid_shape: Optional[Tuple[int, int]] = None, obs_channels: int = 1,
) -> BaselineVelocity:
    return BaselineVelocity(param_dim, obs_dim, cfg, np.random.default_rng(seed), grid_shape, obs_channels)
