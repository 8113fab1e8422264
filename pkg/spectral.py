"""
Spectral Transforms
Frequency-truncated transforms on uniform grids (FFT) and arbitrary point sets (type-II NUDFT)

Conventions:
- Forward: Theta_k = (1/N) sum_n f_n exp(-2 pi i k.x_n), so mode 0 is the mean.
- Inverse: f_n = Re sum_k w_k Theta_k exp(+2 pi i k.x_n).
- Half-spectrum mode set: 0 <= k_D < M in the last dimension, |k_d| < M in the
  others; w_k = 1 when k_D = 0 and 2 otherwise (Hermitian completion).
- A uniform grid has spacing exactly 1/N_d along every dimension.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from autodiff import Tensor, get_dtype, linear_map, matmul, reshape, transpose
from cache import memoize
from data import Discretization, FunctionSample
from errors import DomainError, NonUniformGridError, ShapeError

logger = logging.getLogger(__name__)

HALF = "half"
SIGNED = "signed"


def mode_set(modes: int, dim: int) -> np.ndarray:
    """Integer frequencies of the half-spectrum set, shape (K, D)"""
    if modes < 1:
        raise DomainError(f"modes must be >= 1, got {modes}")
    if dim < 1:
        raise DomainError(f"dimension must be >= 1, got {dim}")
    signed = range(-(modes - 1), modes)
    axes = [signed] * (dim - 1) + [range(modes)]
    return np.array(list(itertools.product(*axes)), dtype=np.int64).reshape(-1, dim)


def reconstruction_weights(freqs: np.ndarray) -> np.ndarray:
    return np.where(freqs[:, -1] == 0, 1.0, 2.0)


def n_modes(modes: int, dim: int) -> int:
    return (2 * modes - 1) ** (dim - 1) * modes


@dataclass(eq=False)
class Spectrum:
    """
    Truncated Fourier coefficients of a (possibly multi-channel) function

    coeffs holds real/imag pairs, shape (K, C, 2); freqs is (K, D).
    """
    coeffs: np.ndarray
    freqs: np.ndarray
    modes: int
    weights: np.ndarray
    convention: str = HALF

    @property
    def dim(self) -> int:
        return self.freqs.shape[1]

    @property
    def channels(self) -> int:
        return self.coeffs.shape[1]

    def complex(self) -> np.ndarray:
        return self.coeffs[..., 0] + 1j * self.coeffs[..., 1]

    def lookup(self, k: Sequence[int]) -> np.ndarray:
        """Complex coefficients (per channel) of frequency tuple k"""
        match = np.where(np.all(self.freqs == np.asarray(k), axis=1))[0]
        if match.size == 0:
            raise DomainError(f"frequency {tuple(k)} not stored")
        return self.complex()[match[0]]

    def to_signed(self) -> "Spectrum":
        """Expand to the full signed set |k_d| < M by Hermitian completion"""
        if self.convention == SIGNED:
            return self
        mirror = self.freqs[:, -1] > 0
        freqs = np.concatenate([self.freqs, -self.freqs[mirror]])
        c = self.complex()
        values = np.concatenate([c, np.conj(c[mirror])])
        return Spectrum(_pairs(values), freqs, self.modes, np.ones(len(freqs)), SIGNED)

    def to_half(self) -> "Spectrum":
        """Fold a signed spectrum back to the half-spectrum set"""
        if self.convention == HALF:
            return self
        keep = self.freqs[:, -1] >= 0
        freqs = self.freqs[keep]
        return Spectrum(self.coeffs[keep], freqs, self.modes, reconstruction_weights(freqs), HALF)


def _pairs(values: np.ndarray) -> np.ndarray:
    return np.stack([values.real, values.imag], axis=-1).astype(get_dtype())


def _check_band(grid_shape: Tuple[int, ...], modes: int) -> None:
    for n in grid_shape:
        if n < 2 * modes - 1:
            raise DomainError(f"grid size {n} cannot resolve {modes} modes (need N >= 2M - 1)")


# ===================
# Uniform Grids (FFT)
# ===================

def _bins(freqs: np.ndarray, grid_shape: Tuple[int, ...]) -> Tuple[np.ndarray, ...]:
    return tuple(np.mod(freqs[:, d], n) for d, n in enumerate(grid_shape))


def fft_analysis(values: np.ndarray, grid_shape: Tuple[int, ...], freqs: np.ndarray, origin: np.ndarray) -> np.ndarray:
    """(B, N, C) samples -> (B, K, C, 2) truncated spectrum via FFT"""
    b, n, c = values.shape
    dim = len(grid_shape)
    grid = values.reshape((b,) + tuple(grid_shape) + (c,))
    spectrum = np.fft.fftn(grid, axes=tuple(range(1, dim + 1))) / n
    picked = spectrum[(slice(None),) + _bins(freqs, grid_shape)]  # (B, K, C)
    phase = np.exp(-2j * np.pi * (freqs @ origin))
    return _pairs(picked * phase[None, :, None])


def fft_synthesis(
    coeffs: np.ndarray, grid_shape: Tuple[int, ...], freqs: np.ndarray, origin: np.ndarray, weights: np.ndarray,
) -> np.ndarray:
    """(B, K, C, 2) spectrum -> (B, N, C) real samples via inverse FFT"""
    b, _, c, _ = coeffs.shape
    dim = len(grid_shape)
    n = int(np.prod(grid_shape))
    phase = np.exp(2j * np.pi * (freqs @ origin)) * weights
    values = (coeffs[..., 0] + 1j * coeffs[..., 1]) * phase[None, :, None]
    full = np.zeros((b,) + tuple(grid_shape) + (c,), dtype=np.complex128)
    np.add.at(full, (slice(None),) + _bins(freqs, grid_shape), values)
    out = np.fft.ifftn(full, axes=tuple(range(1, dim + 1))).real * n
    return out.reshape(b, n, c).astype(get_dtype())


def dft_uniform(f: FunctionSample, modes: int) -> Spectrum:
    """
    First M modes per dimension of a function on a uniform grid, O(N log N)

    Raises:
        NonUniformGridError: positions are not a uniform grid (use nudft_forward)
    """
    disc = f.discretization
    if not disc.is_uniform():
        raise NonUniformGridError("positions are not a uniform grid with spacing 1/N; use nudft_forward")
    _check_band(disc.grid_shape, modes)
    freqs = mode_set(modes, disc.dim)
    coeffs = fft_analysis(f.values[None].astype(np.float64), disc.grid_shape, freqs, disc.origin())[0]
    return Spectrum(coeffs, freqs, modes, reconstruction_weights(freqs))


def idft_uniform(s: Spectrum, grid: Discretization) -> FunctionSample:
    """Evaluate a spectrum on a uniform grid (real part, Hermitian completion via weights)"""
    if not grid.is_uniform():
        raise NonUniformGridError("idft_uniform requires a uniform grid")
    if grid.dim != s.dim:
        raise ShapeError("idft_uniform", s.freqs.shape, grid.positions.shape, "domain dimension")
    values = fft_synthesis(s.coeffs[None].astype(np.float64), grid.grid_shape, s.freqs, grid.origin(), s.weights)[0]
    return FunctionSample(values, grid)


# ===================
# Arbitrary Point Sets (NUDFT)
# ===================

@dataclass(eq=False)
class NudftPlan:
    """
    Dense type-II NUDFT for one discretization

    V is (K, N) with V_kn = exp(-2 pi i k.x_n) / N; Vbar_T is its conjugate transpose.
    """
    positions: Discretization
    modes: int
    dim: int
    freqs: np.ndarray
    V: np.ndarray
    Vbar_T: np.ndarray
    weights: np.ndarray = field(default=None)

    @property
    def n_points(self) -> int:
        return self.positions.n_points

    def analysis_matrix(self) -> np.ndarray:
        """Real stacked form [Re V; Im V], shape (2K, N)"""
        return np.concatenate([self.V.real, self.V.imag]).astype(get_dtype())

    def synthesis_matrix(self) -> np.ndarray:
        """Real form of N * Vbar_T * diag(w) acting on [Re; Im], shape (N, 2K)"""
        scaled = self.n_points * self.Vbar_T * self.weights[None, :]
        return np.concatenate([scaled.real, -scaled.imag], axis=1).astype(get_dtype())


def _plan_key(positions: Discretization, modes: int) -> str:
    return f"{positions.key()}:{modes}"


@memoize("nudft", _plan_key)
def make_nudft_plan(positions: Discretization, modes: int) -> NudftPlan:
    """Build (and memoize) the forward and adjoint matrices for a discretization"""
    freqs = mode_set(modes, positions.dim)
    n = positions.n_points
    if n == 0:
        raise DomainError("cannot plan a transform on an empty discretization")
    phase = 2.0 * np.pi * (freqs @ positions.positions.T)  # (K, N)
    V = np.exp(-1j * phase) / n
    logger.debug(f"Built NUDFT plan: {len(freqs)} modes x {n} points")
    return NudftPlan(positions, modes, positions.dim, freqs, V, V.conj().T, reconstruction_weights(freqs))


def _check_plan(plan: NudftPlan, disc: Discretization) -> None:
    if disc.positions.shape != plan.positions.positions.shape:
        raise ShapeError("nudft", plan.positions.positions.shape, disc.positions.shape, "position/value length mismatch")
    if not np.array_equal(disc.positions, plan.positions.positions):
        raise DomainError("plan positions do not match the sample's discretization")


def nudft_forward(plan: NudftPlan, f: FunctionSample) -> Spectrum:
    """Theta = V f, cost O(N * K)"""
    _check_plan(plan, f.discretization)
    values = plan.V @ f.values.astype(np.float64)
    return Spectrum(_pairs(values), plan.freqs, plan.modes, plan.weights)


def nudft_adjoint(plan: NudftPlan, s: Spectrum) -> FunctionSample:
    """
    f = Re(N * Vbar_T diag(w) Theta)

    Exact inverse on a uniform full-band grid; an approximate inverse elsewhere,
    with error growing as the points depart from uniform spacing.
    """
    s = s.to_half() if s.convention == SIGNED else s
    if s.coeffs.shape[0] != plan.V.shape[0]:
        raise ShapeError("nudft_adjoint", s.coeffs.shape, plan.V.shape, "mode count")
    weighted = s.complex() * plan.weights[:, None]
    values = (plan.n_points * (plan.Vbar_T @ weighted)).real
    return FunctionSample(values.astype(get_dtype()), plan.positions)


def resample(values: np.ndarray, source: Discretization, target: Discretization, modes: int) -> np.ndarray:
    """Spectral resampling: NUDFT on the source points, adjoint evaluation on the target points"""
    spectrum = nudft_forward(make_nudft_plan(source, modes), FunctionSample(values, source))
    return nudft_adjoint(make_nudft_plan(target, modes), spectrum).values


# ===================
# Differentiable Batched Operators
# ===================

class SpectralOperator:
    """Analysis/synthesis pair acting on (B, N, C) tensors"""

    n_points: int = 0

    def __init__(self, modes: int, dim: int):
        self.modes = modes
        self.dim = dim
        self.freqs = mode_set(modes, dim)
        self.weights = reconstruction_weights(self.freqs)

    @property
    def n_modes(self) -> int:
        return len(self.freqs)

    def analysis(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def synthesis(self, s: Tensor) -> Tensor:
        raise NotImplementedError


class FftOperator(SpectralOperator):
    """Uniform-grid path backed by the FFT"""

    def __init__(self, discretization: Discretization, modes: int):
        if not discretization.is_uniform():
            raise NonUniformGridError("FFT path requires a uniform grid")
        _check_band(discretization.grid_shape, modes)
        super().__init__(modes, discretization.dim)
        self.grid_shape = discretization.grid_shape
        self.origin = discretization.origin()
        self.n_points = discretization.n_points

    def analysis(self, x: Tensor) -> Tensor:
        gs, fr, org, n = self.grid_shape, self.freqs, self.origin, self.n_points
        unit = np.ones(len(fr))
        return linear_map(
            x,
            lambda v: fft_analysis(v, gs, fr, org),
            lambda g: fft_synthesis(g, gs, fr, org, unit) / n,
        )

    def synthesis(self, s: Tensor) -> Tensor:
        gs, fr, org, n, w = self.grid_shape, self.freqs, self.origin, self.n_points, self.weights
        return linear_map(
            s,
            lambda c: fft_synthesis(c, gs, fr, org, w),
            lambda g: fft_analysis(g, gs, fr, org) * (w[None, :, None, None] * n),
        )


class NudftOperator(SpectralOperator):
    """
    Arbitrary-point path with dense matrices

    positions is (N, D) when every record shares a discretization, else (B, N, D).
    """

    def __init__(self, positions: np.ndarray, modes: int):
        positions = np.asarray(positions, dtype=np.float64)
        super().__init__(modes, positions.shape[-1])
        self.n_points = positions.shape[-2]
        if positions.ndim == 2:
            plan = make_nudft_plan(Discretization(positions), modes)
            self.A = plan.analysis_matrix()
            self.S = plan.synthesis_matrix()
        else:
            n = positions.shape[1]
            phase = 2.0 * np.pi * np.einsum("bnd,kd->bkn", positions, self.freqs)
            cos, sin = np.cos(phase), np.sin(phase)
            self.A = (np.concatenate([cos, -sin], axis=1) / n).astype(get_dtype())
            w = self.weights[None, None, :]
            self.S = (n * np.concatenate([np.swapaxes(cos, 1, 2) * w, -np.swapaxes(sin, 1, 2) * w], axis=2)).astype(get_dtype())

    def analysis(self, x: Tensor) -> Tensor:
        b, _, c = x.shape
        k = self.n_modes
        y = matmul(self.A, x)                      # (B, 2K, C)
        y = reshape(y, (b, 2, k, c))
        return transpose(y, (0, 2, 3, 1))          # (B, K, C, 2)

    def synthesis(self, s: Tensor) -> Tensor:
        b, k, c, _ = s.shape
        y = transpose(s, (0, 3, 1, 2))             # (B, 2, K, C)
        y = reshape(y, (b, 2 * k, c))
        return matmul(self.S, y)                   # (B, N, C)


def make_operator(
    positions: np.ndarray, modes: int, transform: str = "nudft", grid_shape: Optional[Tuple[int, ...]] = None,
) -> SpectralOperator:
    """
    Choose the transform path for a batch of discretizations

    Args:
        positions: (B, N, D) positions of the batch
        modes: modes kept per dimension
        transform: 'nudft' for arbitrary points, 'fft' for uniform grids
        grid_shape: grid shape, required for the FFT path
    """
    positions = np.asarray(positions, dtype=np.float64)
    shared = bool(np.all(positions == positions[:1]))
    if transform == "fft":
        if not shared or grid_shape is None:
            raise NonUniformGridError("FFT path needs one shared uniform grid per batch")
        return FftOperator(Discretization(positions[0], grid_shape=grid_shape), modes)
    if transform != "nudft":
        raise DomainError(f"unknown transform '{transform}'")
    return NudftOperator(positions[0] if shared else positions, modes)


# ===================
# Baseline Spectral Preprocessing
# ===================

@dataclass
class SpectralPreprocessor:
    """
    Replicate-pad, real FFT, keep the first M modes and flatten real/imag parts

    1-D output length is 2M; 2-D crops a centered M x M block, length 2M^2.
    """
    grid_shape: Tuple[int, ...]
    modes: int
    pad_width: int

    def __post_init__(self):
        if self.pad_width < 0:
            raise DomainError(f"pad_width must be >= 0, got {self.pad_width}")
        if len(self.grid_shape) not in (1, 2):
            raise DomainError("spectral preprocessing supports 1-D and 2-D grids")
        self.grid_shape = tuple(self.grid_shape)

    @property
    def padded_shape(self) -> Tuple[int, ...]:
        return tuple(n + 2 * self.pad_width for n in self.grid_shape)

    @property
    def output_dim(self) -> int:
        return 2 * self.modes ** len(self.grid_shape)

    def _crop(self, n: int) -> slice:
        start = n // 2 - self.modes // 2
        return slice(start, start + self.modes)

    def forward(self, values: np.ndarray) -> np.ndarray:
        """(B, N) grid values -> (B, output_dim) real coefficients"""
        b = values.shape[0]
        grid = values.reshape((b,) + self.grid_shape)
        pad = [(0, 0)] + [(self.pad_width, self.pad_width)] * len(self.grid_shape)
        padded = np.pad(grid, pad, mode="edge")
        if len(self.grid_shape) == 1:
            coeffs = np.fft.rfft(padded, axis=1)[:, : self.modes]
        else:
            h, w = self.padded_shape
            shifted = np.fft.fftshift(np.fft.fft2(padded, axes=(1, 2)), axes=(1, 2))
            coeffs = shifted[:, self._crop(h), self._crop(w)].reshape(b, -1)
        return np.concatenate([coeffs.real, coeffs.imag], axis=1)

    def inverse(self, coefficients: np.ndarray) -> np.ndarray:
        """(B, output_dim) coefficients -> (B, N) grid values"""
        b = coefficients.shape[0]
        half = coefficients.shape[1] // 2
        coeffs = coefficients[:, :half] + 1j * coefficients[:, half:]
        p = self.pad_width
        if len(self.grid_shape) == 1:
            (n_pad,) = self.padded_shape
            full = np.zeros((b, n_pad // 2 + 1), dtype=np.complex128)
            full[:, : self.modes] = coeffs
            out = np.fft.irfft(full, n=n_pad, axis=1)[:, p: p + self.grid_shape[0]]
        else:
            h, w = self.padded_shape
            full = np.zeros((b, h, w), dtype=np.complex128)
            full[:, self._crop(h), self._crop(w)] = coeffs.reshape(b, self.modes, self.modes)
            out = np.fft.ifft2(np.fft.ifftshift(full, axes=(1, 2)), axes=(1, 2)).real
            out = out[:, p: p + self.grid_shape[0], p: p + self.grid_shape[1]]
        return out.reshape(b, -1)


def spectral_preprocess_baseline(f: FunctionSample, modes: int, pad_width: int) -> np.ndarray:
    """Real coefficient vector of a single-channel function on a uniform grid"""
    disc = f.discretization
    if not disc.is_uniform():
        raise NonUniformGridError("spectral preprocessing requires a uniform grid")
    pre = SpectralPreprocessor(disc.grid_shape, modes, pad_width)
    return pre.forward(f.values[:, 0][None])[0]


def spectral_postprocess_baseline(coefficients: np.ndarray, grid: Discretization, modes: int, pad_width: int) -> FunctionSample:
    """Inverse of spectral_preprocess_baseline"""
    pre = SpectralPreprocessor(grid.grid_shape, modes, pad_width)
    return FunctionSample(pre.inverse(np.asarray(coefficients)[None])[0], grid)
