"""Dense tensors with reverse-mode differentiation.

Every operation that receives at least one tensor with ``requires_grad`` and
runs while recording is enabled links its output to its inputs together with
a closure that maps the output gradient to input gradients.  ``backward``
walks that graph once in reverse topological order and then releases it, so a
second backward over the same graph raises :class:`TapeError`.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, ShapeError, TapeError

_state = threading.local()


def is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_released", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._released = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def make_result(data: np.ndarray, parents: Sequence[Tensor],
                backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap ``data`` as the output of an op, recording the edge if needed."""
    out = Tensor(data)
    if is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate; intermediate gradients and the graph itself
    are dropped afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise TapeError("graph already consumed by a previous backward pass")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        g = node.grad
        if g is not None:
            node._backward(g)
        node._backward = None
        node._parents = ()
        node._released = True
        if node is not loss:
            node.grad = None


def tensor_new(shape: Iterable[int], fill: str = "zeros", *, value: float | None = None,
               seed: int | None = None, fan_in: int | None = None,
               dtype=np.float32, requires_grad: bool = False) -> Tensor:
    """Allocate a tensor filled with zeros, ones, a constant or He-normal noise."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    if fill == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif fill == "ones":
        data = np.ones(shape, dtype=dtype)
    elif fill == "constant":
        if value is None:
            raise ContractError("constant fill needs a value")
        data = np.full(shape, value, dtype=dtype)
    elif fill == "he_normal":
        if fan_in is None:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        rng = np.random.default_rng(seed)
        data = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    else:
        raise ContractError(f"unknown fill {fill!r}")
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------- elementwise

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def bw(g):
        accumulate(a, g)
        accumulate(b, g)

    return make_result(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def bw(g):
        accumulate(a, g)
        accumulate(b, -g)

    return make_result(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def bw(g):
        accumulate(a, g * b.data)
        accumulate(b, g * a.data)

    return make_result(a.data * b.data, (a, b), bw)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c_ = a.dtype.type(c)
    return make_result(a.data * c_, (a,), lambda g: accumulate(a, g * c_))


def scalar_add(a: Tensor, c: float) -> Tensor:
    return make_result(a.data + a.dtype.type(c), (a,), lambda g: accumulate(a, g))


def elementwise(kind: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "scalar_mul":
        return scalar_mul(a, b)
    if kind == "scalar_add":
        return scalar_add(a, b)
    raise ContractError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------- activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,),
                       lambda g: accumulate(x, g * mask))


def leaky_relu(x: Tensor, alpha: float = 0.01) -> Tensor:
    mask = x.data > 0
    a = x.dtype.type(alpha)
    slope = np.where(mask, x.dtype.type(1), a)
    return make_result(x.data * slope, (x,), lambda g: accumulate(x, g * slope))


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    mask = x.data > 0
    a = x.dtype.type(alpha)
    neg = a * np.expm1(np.minimum(x.data, 0))
    out = np.where(mask, x.data, neg)
    slope = np.where(mask, x.dtype.type(1), neg + a)
    return make_result(out, (x,), lambda g: accumulate(x, g * slope))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clipped so the output stays strictly inside (0, 1)."""
    info = np.finfo(x.dtype)
    out = np.clip(expit(x.data), info.tiny, 1 - info.epsneg).astype(x.dtype)
    return make_result(out, (x,), lambda g: accumulate(x, g * out * (1 - out)))


def activation(kind: str, x: Tensor, alpha: float | None = None) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "elu":
        return elu(x, 1.0 if alpha is None else alpha)
    if kind == "leaky_relu":
        return leaky_relu(x, 0.01 if alpha is None else alpha)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- linear algebra, shape

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        accumulate(a, g @ b.data.T)
        accumulate(b, a.data.T @ g)

    return make_result(a.data @ b.data, (a, b), bw)


def sum_all(x: Tensor) -> Tensor:
    return make_result(np.asarray(x.data.sum(), dtype=x.dtype).reshape(()), (x,),
                       lambda g: accumulate(x, np.broadcast_to(g, x.shape)))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return make_result(np.asarray(x.data.mean(), dtype=x.dtype).reshape(()), (x,),
                       lambda g: accumulate(x, np.broadcast_to(g / n, x.shape)))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    return make_result(out, (x,), lambda g: accumulate(x, g.reshape(x.shape)))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1, keeping input order."""
    if not xs:
        raise ContractError("concat needs at least one tensor")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or t.shape[:1] != ref[:1] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat: non-channel extents differ, {ref} vs {t.shape}")
    if len(xs) == 1:
        return xs[0]
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def bw(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            accumulate(t, g[:, lo:hi])

    return make_result(np.concatenate([t.data for t in xs], axis=1), tuple(xs), bw)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {sizes} do not cover {x.shape[1]} channels")
    outs = []
    lo = 0
    for s in sizes:
        hi = lo + s

        def bw(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            accumulate(x, full)

        outs.append(make_result(x.data[:, lo:hi].copy(), (x,), bw))
        lo = hi
    return outs


def stack_views(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack same-shaped tensors along a new axis."""
    if not xs:
        raise ContractError("stack needs at least one tensor")
    for t in xs[1:]:
        _same_shape(xs[0], t, "stack")

    def bw(g):
        for i, t in enumerate(xs):
            accumulate(t, np.take(g, i, axis=axis))

    return make_result(np.stack([t.data for t in xs], axis=axis), tuple(xs), bw)


def unstack(x: Tensor, axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into tensors without that axis."""
    outs = []
    for i in range(x.shape[axis]):
        def bw(g, i=i):
            full = np.zeros_like(x.data)
            idx = [slice(None)] * x.ndim
            idx[axis] = i
            full[tuple(idx)] = g
            accumulate(x, full)

        outs.append(make_result(np.ascontiguousarray(np.take(x.data, i, axis=axis)), (x,), bw))
    return outs
