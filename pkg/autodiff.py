"""
Autodiff Core
Dense real-array arithmetic with reverse-mode gradients over a closed primitive set

Complex numbers are stored as a trailing axis of size 2 (real, imaginary).
Broadcasting is limited to leading dimensions: an operand may only be
broadcast against another whose trailing shape it equals.
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from errors import DomainError, ShapeError

logger = logging.getLogger(__name__)

_DTYPES = {"float64": np.float64, "float32": np.float32}
_precision = "float64"
_grad_enabled = True

ArrayLike = Union[np.ndarray, float, int, Sequence]


def set_precision(name: str) -> None:
    """Select the process-wide floating point profile ('float64' or 'float32')"""
    global _precision
    if name not in _DTYPES:
        raise DomainError(f"unknown precision '{name}', expected one of {sorted(_DTYPES)}")
    _precision = name
    logger.debug(f"Precision profile set to {name}")


def get_precision() -> str:
    return _precision


def get_dtype() -> type:
    return _DTYPES[_precision]


@contextmanager
def no_grad():
    """Evaluate without recording a graph (sampling, validation)"""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


# ===================
# Graph Nodes
# ===================

class Tensor:
    """
    A value in the differentiation graph (DiffNode)

    parents holds (node, reverse rule) pairs; a reverse rule maps the
    cotangent of this node to the cotangent contribution of that parent.
    """

    __slots__ = ("data", "requires_grad", "parents", "op", "name")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        parents: Tuple = (),
        op: str = "leaf",
        name: Optional[str] = None,
    ):
        if isinstance(data, np.ndarray) and data.dtype == get_dtype():
            self.data = data
        else:
            self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = requires_grad
        self.parents = parents
        self.op = op
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


class Parameter(Tensor):
    """A learnable leaf; frozen parameters keep requires_grad False"""

    __slots__ = ()

    def __init__(self, data: ArrayLike, name: Optional[str] = None, frozen: bool = False):
        super().__init__(np.array(data, dtype=get_dtype()), requires_grad=not frozen, name=name)

    @property
    def frozen(self) -> bool:
        return not self.requires_grad


def as_tensor(value: Union["Tensor", ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data: np.ndarray, op: str, parents: List[Tuple[Tensor, Callable]]) -> Tensor:
    """Build an output node, keeping only parents that carry gradients"""
    if not _grad_enabled:
        return Tensor(data, op=op)
    tracked = tuple((p, rule) for p, rule in parents if p.requires_grad)
    return Tensor(data, requires_grad=bool(tracked), parents=tracked, op=op)


# ===================
# Primitive Registry
# ===================

PRIMITIVES: Dict[str, Callable] = {}


def primitive(name: str) -> Callable:
    """Register a function as a differentiable primitive"""
    def decorator(f: Callable) -> Callable:
        PRIMITIVES[name] = f
        return f
    return decorator


def op_set() -> Tuple[str, ...]:
    """The documented closed set of primitives, each with a reverse rule"""
    return tuple(PRIMITIVES)


def _broadcast_shape(op: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(op, a, b, "only leading-dimension broadcasting is supported")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ===================
# Elementwise
# ===================

@primitive("add")
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    return _result(a.data + b.data, "add", [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


@primitive("sub")
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    return _result(a.data - b.data, "sub", [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: -_unbroadcast(g, b.shape)),
    ])


@primitive("mul")
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    return _result(a.data * b.data, "mul", [
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ])


@primitive("exp")
def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, "exp", [(x, lambda g: g * out)])


@primitive("log")
def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError(f"log of non-positive values (min {x.data.min():.3e})")
    return _result(np.log(x.data), "log", [(x, lambda g: g / x.data)])


@primitive("square")
def square(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * x.data, "square", [(x, lambda g: 2.0 * g * x.data)])


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@primitive("gelu")
def gelu(x) -> Tensor:
    """Exact GELU: x * Phi(x)"""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return _result(x.data * cdf, "gelu", [(x, lambda g: g * (cdf + x.data * pdf))])


# ===================
# Linear Algebra
# ===================

@primitive("matmul")
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape, "operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, "inner dimensions differ")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    return _result(a.data @ b.data, "matmul", [
        (a, lambda g: _unbroadcast(g @ _swap(b.data), a.shape)),
        (b, lambda g: _unbroadcast(_swap(a.data) @ g, b.shape)),
    ])


@primitive("complex_mul")
def complex_mul(a, b) -> Tensor:
    """
    Complex product on real/imag pairs

    a: (..., n, k, 2), b: (..., k, m, 2) -> (..., n, m, 2). The elementwise
    product (a+bi)(c+di) is the case n = k = m = 1; larger k contracts a
    channel axis per retained mode.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 3 or b.ndim < 3 or a.shape[-1] != 2 or b.shape[-1] != 2:
        raise ShapeError("complex_mul", a.shape, b.shape, "expected trailing real/imag axis of size 2")
    if a.shape[-2] != b.shape[-3]:
        raise ShapeError("complex_mul", a.shape, b.shape, "inner dimensions differ")
    _broadcast_shape("complex_mul", a.shape[:-3], b.shape[:-3])
    ar, ai = a.data[..., 0], a.data[..., 1]
    br, bi = b.data[..., 0], b.data[..., 1]
    out = np.stack([ar @ br - ai @ bi, ar @ bi + ai @ br], axis=-1)

    def grad_a(g):
        gr, gi = g[..., 0], g[..., 1]
        da = np.stack([gr @ _swap(br) + gi @ _swap(bi), gi @ _swap(br) - gr @ _swap(bi)], axis=-1)
        return _unbroadcast(da, a.shape)

    def grad_b(g):
        gr, gi = g[..., 0], g[..., 1]
        db = np.stack([_swap(ar) @ gr + _swap(ai) @ gi, _swap(ar) @ gi - _swap(ai) @ gr], axis=-1)
        return _unbroadcast(db, b.shape)

    return _result(out, "complex_mul", [(a, grad_a), (b, grad_b)])


@primitive("linear_map")
def linear_map(x, forward: Callable[[np.ndarray], np.ndarray], adjoint: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """
    Apply a fixed real-linear operator given as a forward/adjoint pair

    Used for the FFT-based spectral transforms; the reverse rule is the adjoint.
    """
    x = as_tensor(x)
    out = np.asarray(forward(x.data), dtype=x.data.dtype)
    return _result(out, "linear_map", [(x, lambda g: adjoint(g))])


# ===================
# Shape Manipulation
# ===================

@primitive("transpose")
def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), "transpose", [(x, lambda g: np.transpose(g, inverse))])


@primitive("reshape")
def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError("reshape", x.shape, tuple(shape), str(e)) from e
    return _result(out, "reshape", [(x, lambda g: g.reshape(x.shape))])


@primitive("concat")
def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or t.shape[:ax] + t.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            raise ShapeError("concat", ref.shape, t.shape, f"mismatch off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def rule(i):
        index = [slice(None)] * ref.ndim
        index[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
        return lambda g: g[tuple(index)]

    return _result(out, "concat", [(t, rule(i)) for i, t in enumerate(tensors)])


@primitive("slice")
def slice_(x, key) -> Tensor:
    """Basic (non-fancy) indexing; use gather for index lists"""
    x = as_tensor(x)
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not (isinstance(k, (int, np.integer, slice)) or k is Ellipsis):
            raise DomainError("slice accepts ints, slices and Ellipsis; use gather for index lists")
    out = x.data[key]

    def rule(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[key] = g
        return full

    return _result(np.array(out), "slice", [(x, rule)])


@primitive("gather")
def gather(x, indices: np.ndarray, axis: int = 0) -> Tensor:
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    ax = axis % x.ndim
    if indices.size and (indices.min() < -x.shape[ax] or indices.max() >= x.shape[ax]):
        raise ShapeError("gather", x.shape, indices.shape, f"index out of range on axis {axis}")
    out = np.take(x.data, indices, axis=ax)

    def rule(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(full, (slice(None),) * ax + (indices,), g)
        return full

    return _result(out, "gather", [(x, rule)])


# ===================
# Reductions
# ===================

def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


@primitive("sum")
def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _result(np.asarray(out), "sum", [(x, lambda g: np.array(_expand_reduced(g, x.shape, axis, keepdims)))])


@primitive("mean")
def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.size / max(np.asarray(out).size, 1)
    return _result(
        np.asarray(out), "mean",
        [(x, lambda g: np.array(_expand_reduced(g, x.shape, axis, keepdims)) / count)],
    )


# ===================
# Reverse Pass
# ===================

@dataclass
class BackwardStats:
    """Bookkeeping from the most recent reverse pass"""
    nodes_visited: int = 0
    unreachable: List[int] = field(default_factory=list)


_last_stats = BackwardStats()


def last_backward_stats() -> BackwardStats:
    return _last_stats


def _topological_order(root: Tensor) -> List[Tensor]:
    """Iterative post-order over gradient-carrying nodes; each node appears once"""
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def vjp(output: Tensor, inputs: Sequence[Tensor], cotangent: np.ndarray) -> List[np.ndarray]:
    """
    Vector-Jacobian product of output with respect to inputs

    Args:
        output: graph node to differentiate
        inputs: leaves or intermediate nodes
        cotangent: array shaped like output

    Returns:
        One gradient array per input (zeros for inputs not reachable from output)
    """
    global _last_stats
    cotangent = np.asarray(cotangent, dtype=output.data.dtype)
    if cotangent.shape != output.shape:
        raise ShapeError("vjp", output.shape, cotangent.shape, "cotangent must match output")

    stats = BackwardStats()
    grads: Dict[int, np.ndarray] = {}
    if output.requires_grad:
        grads[id(output)] = cotangent
        for node in reversed(_topological_order(output)):
            stats.nodes_visited += 1
            g = grads.get(id(node))
            if g is None:
                continue
            for parent, rule in node.parents:
                contribution = rule(g)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + contribution
                else:
                    grads[id(parent)] = contribution

    results = []
    for i, p in enumerate(inputs):
        g = grads.get(id(p))
        if g is None:
            stats.unreachable.append(i)
            g = np.zeros(p.shape, dtype=p.data.dtype)
        results.append(np.asarray(g))
    if stats.unreachable:
        logger.warning(f"{len(stats.unreachable)} input(s) unreachable from output; returning zero gradients")
    _last_stats = stats
    return results


def grad(loss: Tensor, params: Sequence[Tensor]) -> List[np.ndarray]:
    """dLoss/dParam for every param; loss must hold a single value"""
    if loss.size != 1:
        raise ShapeError("grad", loss.shape, (), "loss must be scalar-valued")
    return vjp(loss, params, np.ones(loss.shape, dtype=loss.data.dtype))


def finite_diff_check(
    f: Callable[[List[Tensor]], Tensor],
    params: Sequence[np.ndarray],
    eps: float = 1e-6,
) -> float:
    """
    Compare reverse-mode gradients against central differences

    Returns:
        max over coordinates of |analytic - numeric| / (|analytic| + eps)
    """
    if eps <= 0:
        raise DomainError("eps must be positive")
    values = [np.array(p, dtype=get_dtype()) for p in params]
    leaves = [Tensor(v, requires_grad=True) for v in values]
    analytic = grad(f(leaves), leaves)

    worst = 0.0
    for i, v in enumerate(values):
        flat = v.reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + eps
            up = float(f([Tensor(u) for u in values]).data.sum())
            flat[j] = original - eps
            down = float(f([Tensor(u) for u in values]).data.sum())
            flat[j] = original
            numeric = (up - down) / (2.0 * eps)
            a = float(analytic[i].reshape(-1)[j])
            worst = max(worst, abs(a - numeric) / (abs(a) + eps))
    return worst
