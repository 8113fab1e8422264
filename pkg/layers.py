"""
Layers
Parameter containers and the dense building blocks shared by every network
"""

import logging
from typing import Dict, List, Sequence

import numpy as np

from autodiff import Parameter, Tensor, as_tensor, gelu, get_dtype, matmul
from errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)


class Module:
    """Named parameters and child modules, addressed by dotted paths"""

    def __init__(self):
        self._params: Dict[str, Parameter] = {}
        self._children: Dict[str, "Module"] = {}

    def param(self, name: str, data: np.ndarray, frozen: bool = False) -> Parameter:
        p = Parameter(data, name=name, frozen=frozen)
        self._params[name] = p
        return p

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Dict[str, Parameter]:
        out = {f"{prefix}{k}": p for k, p in self._params.items()}
        for name, module in self._children.items():
            out.update(module.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self) -> List[Parameter]:
        """Trainable parameters in a stable order"""
        return [p for p in self.named_parameters().values() if p.requires_grad]

    def parameter_count(self, trainable_only: bool = True) -> int:
        params = self.named_parameters().values()
        return int(sum(p.size for p in params if p.requires_grad or not trainable_only))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError(f"state is missing parameters: {', '.join(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=get_dtype())
            if value.shape != p.shape:
                raise ShapeError("load_state_dict", p.shape, value.shape, name)
            p.data = value.copy()


def check_finite(t: Tensor, location: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite values after {location}", location=location)
    return t


class Linear(Module):
    """x @ W + b over the trailing axis; fan-in scaled uniform init"""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        super().__init__()
        self.n_in = n_in
        self.n_out = n_out
        bound = 1.0 / np.sqrt(max(n_in, 1))
        if zero:
            self.W = self.param("W", np.zeros((n_in, n_out)))
            self.b = self.param("b", np.zeros(n_out))
        else:
            self.W = self.param("W", rng.uniform(-bound, bound, size=(n_in, n_out)))
            self.b = self.param("b", rng.uniform(-bound, bound, size=n_out))

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ShapeError("Linear", x.shape, self.W.shape, "input features")
        return matmul(x, self.W) + self.b


class MLP(Module):
    """Linear layers with GELU between them (none after the last)"""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, zero_last: bool = False):
        super().__init__()
        if len(sizes) < 2:
            raise ValueError(f"an MLP needs at least input and output sizes, got {list(sizes)}")
        self.sizes = list(sizes)
        self.layers = [
            self.child(f"l{i}", Linear(a, b, rng, zero=zero_last and i == len(sizes) - 2))
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x) -> Tensor:
        h = as_tensor(x)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = gelu(h)
        return h


class FourierTimeEmbedding(Module):
    """Frozen random Fourier features of t followed by a trainable linear map"""

    def __init__(self, n_features: int, n_out: int, scale: float, rng: np.random.Generator):
        super().__init__()
        self.freqs = self.param("freqs", rng.normal(0.0, scale, size=n_features), frozen=True)
        self.proj = self.child("proj", Linear(2 * n_features, n_out, rng))

    def features(self, t: np.ndarray) -> np.ndarray:
        """(B,) times -> (B, 2F) constant features"""
        angles = 2.0 * np.pi * np.asarray(t, dtype=np.float64).reshape(-1, 1) * self.freqs.data[None, :]
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1).astype(get_dtype())

    def __call__(self, t: np.ndarray) -> Tensor:
        return self.proj(Tensor(self.features(t)))


def count_linear(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


def count_mlp(sizes: Sequence[int]) -> int:
    return sum(count_linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))
