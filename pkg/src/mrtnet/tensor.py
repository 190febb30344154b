"""Dense tensors with a define-by-run reverse-mode tape.

Every differentiable operation produces a new :class:`Tensor` holding its
parents and a closure that maps the output gradient to one gradient per
parent. :func:`backward` orders the recorded graph topologically and walks it
once in reverse.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_DEBUG_FINITE = False

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def get_default_dtype() -> type:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default dtype (``float64`` for gradient checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


@contextlib.contextmanager
def debug_finite(enabled: bool = True) -> Iterator[None]:
    """Raise as soon as a forward result contains NaN or Inf."""
    global _DEBUG_FINITE
    previous = _DEBUG_FINITE
    _DEBUG_FINITE = enabled
    try:
        yield
    finally:
        _DEBUG_FINITE = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap ``data`` as the output of an operation on ``parents``.

    Layers outside this module use this to register fused operations with
    hand-written backward rules.
    """
    if _DEBUG_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


# -- elementwise -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    av, bv = a.data, b.data
    return record(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def elementwise(op: str, a: Tensor, b: Optional[Tensor] = None, c: float = 1.0) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, tanh, scale."""
    binary = {"add": add, "sub": sub, "mul": mul}
    if op in binary:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return binary[op](a, b)
    if op == "relu":
        return relu(a)
    if op == "tanh":
        return tanh(a)
    if op == "scale":
        return scale(a, c)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- reductions --------------------------------------------------------------

def _check_axis(a: Tensor, axis) -> None:
    if axis is None:
        if a.data.size == 0:
            raise ValueError("cannot reduce an empty tensor")
        return
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"axis {axis} out of range for rank {a.ndim}")
    if a.shape[axis] == 0:
        raise ValueError(f"cannot reduce over empty axis {axis}")


def reduce_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    _check_axis(a, axis)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis), dtype=a.dtype)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(out, (a,), backward, "sum")


def reduce_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    _check_axis(a, axis)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / count)


def reduce_min(a: Tensor, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Minimum along ``axis`` plus the argmin; ties go to the lowest index.

    The gradient flows only to the selected element.
    """
    _check_axis(a, axis)
    axis = axis % a.ndim
    idx = np.argmin(a.data, axis=axis)
    vals = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (full,)

    return record(np.asarray(vals), (a,), backward, "min"), idx


def reduce(op: str, a: Tensor, axis: Optional[int] = None):
    if op == "sum":
        return reduce_sum(a, axis)
    if op == "mean":
        return reduce_mean(a, axis)
    if op == "min":
        return reduce_min(a, -1 if axis is None else axis)
    raise ValueError(f"unknown reduction {op!r}")


# -- shape plumbing -----------------------------------------------------------

def concat_channels(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along the channel axis (axis 1 of ``[B, C, L]``)."""
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(p.shape, ref)) if i != axis % len(ref)
        ):
            raise ValueError(f"concat_channels: incompatible shapes {list(ref)} and {list(p.shape)}")
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=axis)

    def backward(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(parts))
        )

    return record(out, tuple(parts), backward, "concat")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    av, bv = a.data, b.data
    return record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


# -- backward ----------------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Operations reachable from ``root``, each after all of its inputs."""
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-6,
    coords: Optional[Sequence[int]] = None,
) -> float:
    """Max relative error between tape and central-difference gradients.

    ``coords`` restricts the comparison to selected flat indices of ``x``.
    The error at each coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    A NaN anywhere yields ``inf``.
    """
    x = Tensor(x.data.copy(), requires_grad=True)
    loss = f(x)
    backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f(Tensor(x.data)).data)
            flat[i] = orig - eps
            down = float(f(Tensor(x.data)).data)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            if not (np.isfinite(numeric) and np.isfinite(a)):
                return float("inf")
            worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    return worst
