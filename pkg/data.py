"""
Data Carriers
Discretizations, function samples and simulation records
"""

import hashlib
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DomainError, ShapeError


@dataclass(eq=False)
class Discretization:
    """
    Ordered point positions on the normalized domain [0,1]^D

    grid_shape is set for tensor-product grids stored in row-major order;
    uniform grids place points at n / N_d in every dimension.
    """
    positions: np.ndarray  # (N, D)
    grid_shape: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim == 1:
            self.positions = self.positions[:, None]
        if self.positions.ndim != 2:
            raise ShapeError("Discretization", self.positions.shape, ("N", "D"))
        if self.grid_shape is not None:
            self.grid_shape = tuple(int(n) for n in self.grid_shape)
            if int(np.prod(self.grid_shape)) != self.positions.shape[0] or len(self.grid_shape) != self.dim:
                raise ShapeError("Discretization", self.grid_shape, self.positions.shape, "grid shape mismatch")

    @classmethod
    def uniform(cls, shape: Union[int, Sequence[int]], offset: float = 0.0) -> "Discretization":
        """Periodic uniform grid: points at offset + n / N_d along each dimension"""
        shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
        axes = [offset + np.arange(n) / n for n in shape]
        mesh = np.meshgrid(*axes, indexing="ij")
        positions = np.stack([m.reshape(-1) for m in mesh], axis=-1)
        return cls(positions, grid_shape=shape)

    @classmethod
    def random(cls, n_points: int, dim: int, rng: np.random.Generator, sort: bool = True) -> "Discretization":
        positions = rng.uniform(0.0, 1.0, size=(n_points, dim))
        if sort and dim == 1:
            positions = np.sort(positions, axis=0)
        return cls(positions)

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def axis_spacing(self) -> Optional[List[np.ndarray]]:
        if self.grid_shape is None:
            return None
        grid = self.positions.reshape(*self.grid_shape, self.dim)
        deltas = []
        for d in range(self.dim):
            index = [0] * self.dim
            index[d] = slice(None)
            deltas.append(np.diff(grid[tuple(index) + (d,)]))
        return deltas

    def is_uniform(self, tol: float = 1e-9) -> bool:
        """True for a tensor grid with spacing exactly 1/N_d in every dimension"""
        if self.grid_shape is None:
            return False
        grid = self.positions.reshape(*self.grid_shape, self.dim)
        origin = grid[(0,) * self.dim]
        for d, n in enumerate(self.grid_shape):
            coords = origin[d] + np.arange(n) / n
            shape = [1] * self.dim
            shape[d] = n
            if np.max(np.abs(grid[..., d] - coords.reshape(shape))) > tol:
                return False
        return True

    def origin(self) -> np.ndarray:
        return self.positions[0].copy()

    def subset(self, indices: np.ndarray) -> "Discretization":
        return Discretization(self.positions[np.asarray(indices)])

    def key(self) -> str:
        """Content hash used to memoize plans and factorizations"""
        digest = hashlib.sha1(np.ascontiguousarray(self.positions).tobytes()).hexdigest()
        return f"{self.positions.shape}:{digest}"

    def same_as(self, other: "Discretization") -> bool:
        return self.positions.shape == other.positions.shape and np.array_equal(self.positions, other.positions)


@dataclass(eq=False)
class FunctionSample:
    """Values of a function-valued quantity on a discretization, shape (N, C)"""
    values: np.ndarray
    discretization: Discretization

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.shape[0] != self.discretization.n_points:
            raise ShapeError(
                "FunctionSample", self.values.shape, self.discretization.positions.shape,
                "value/position length mismatch",
            )

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass(eq=False)
class SimulationRecord:
    """One training tuple (pos_theta, theta, pos_x, x, eta)"""
    pos_theta: np.ndarray  # (N_theta, D)
    theta: np.ndarray      # (N_theta, C_theta)
    pos_x: np.ndarray      # (N_x, D)
    x: np.ndarray          # (N_x, C_x)
    eta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.theta.shape[0] != self.pos_theta.shape[0]:
            raise ShapeError("SimulationRecord", self.theta.shape, self.pos_theta.shape, "theta positions")
        if self.x.shape[0] != self.pos_x.shape[0]:
            raise ShapeError("SimulationRecord", self.x.shape, self.pos_x.shape, "observation positions")

    @property
    def theta_sample(self) -> FunctionSample:
        return FunctionSample(self.theta, Discretization(self.pos_theta))

    @property
    def x_sample(self) -> FunctionSample:
        return FunctionSample(self.x, Discretization(self.pos_x))


@dataclass(eq=False)
class SimulationSet:
    """
    Stacked simulation records sharing point counts

    Arrays: pos_theta (K, N_theta, D), theta (K, N_theta, C_theta),
    pos_x (K, N_x, D), x (K, N_x, C_x), eta (K, E).
    """
    pos_theta: np.ndarray
    theta: np.ndarray
    pos_x: np.ndarray
    x: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        k = self.theta.shape[0]
        for name in ("pos_theta", "pos_x", "x", "eta"):
            if getattr(self, name).shape[0] != k:
                raise ShapeError("SimulationSet", self.theta.shape, getattr(self, name).shape, f"record count of {name}")

    def __len__(self) -> int:
        return self.theta.shape[0]

    def __getitem__(self, i: int) -> SimulationRecord:
        return SimulationRecord(self.pos_theta[i], self.theta[i], self.pos_x[i], self.x[i], self.eta[i])

    def __iter__(self) -> Iterator[SimulationRecord]:
        for i in range(len(self)):
            yield self[i]

    @property
    def eta_dim(self) -> int:
        return self.eta.shape[1]

    def take(self, indices: np.ndarray) -> "SimulationSet":
        indices = np.asarray(indices)
        return SimulationSet(
            self.pos_theta[indices], self.theta[indices], self.pos_x[indices], self.x[indices], self.eta[indices],
        )

    def arrays(self) -> dict:
        return {"pos_theta": self.pos_theta, "theta": self.theta, "pos_x": self.pos_x, "x": self.x, "eta": self.eta}

    @classmethod
    def from_records(cls, records: Sequence[SimulationRecord]) -> "SimulationSet":
        if not records:
            raise DomainError("cannot stack an empty record list")
        try:
            return cls(
                np.stack([r.pos_theta for r in records]),
                np.stack([r.theta for r in records]),
                np.stack([r.pos_x for r in records]),
                np.stack([r.x for r in records]),
                np.stack([np.asarray(r.eta, dtype=np.float64).reshape(-1) for r in records]),
            )
        except ValueError as e:
            raise ShapeError("SimulationSet", records[0].theta.shape, records[-1].theta.shape, str(e)) from e
