"""1D layers, batch norm, classification loss and the Adam optimizer."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .tensor import Tensor, get_default_dtype, record


# -- functional layers -------------------------------------------------------

def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Kernel-2/stride-2 or kernel-1/stride-1 convolution, picked from the weight.

    ``x`` is ``[B, C_in, L]`` and ``weight`` is ``[C_out, C_in, kernel]``.
    """
    B, C, L = x.shape
    O, Cw, K = weight.shape
    if Cw != C:
        raise ValueError(f"conv1d: input has {C} channels, weight expects {Cw}")
    if K not in (1, 2):
        raise ValueError(f"conv1d: kernel must be 1 or 2, got {K}")
    if K == 2 and L % 2:
        raise ValueError(f"conv1d: stride-2 convolution needs an even length, got {L}")
    T = L // K
    xv, wv = x.data, weight.data
    # columns: [B*T, C*K], one row per output position
    cols = xv.reshape(B, C, T, K).transpose(0, 2, 1, 3).reshape(B * T, C * K)
    w2 = wv.reshape(O, C * K)
    out = (cols @ w2.T).reshape(B, T, O).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(B * T, O)
        gx = (g2 @ w2).reshape(B, T, C, K).transpose(0, 2, 1, 3).reshape(B, C, L)
        gw = (g2.T @ cols).reshape(O, C, K)
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record(out, parents, backward, f"conv1d_k{K}")


def transposed_conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Kernel-2/stride-2 transposed convolution doubling the length.

    ``out[c, 2t + j] = sum_ci weight[c, ci, j] * x[ci, t] + bias[c]``.
    """
    B, C, T = x.shape
    O, Cw, K = weight.shape
    if Cw != C:
        raise ValueError(f"transposed_conv1d: input has {C} channels, weight expects {Cw}")
    if K != 2:
        raise ValueError("transposed_conv1d supports kernel 2, stride 2 only")
    xv = x.data
    rows = xv.transpose(0, 2, 1).reshape(B * T, C)
    wt = weight.data.transpose(1, 0, 2).reshape(C, O * 2)
    out = (rows @ wt).reshape(B, T, O, 2).transpose(0, 2, 1, 3).reshape(B, O, 2 * T)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.reshape(B, O, T, 2).transpose(0, 2, 1, 3).reshape(B * T, O * 2)
        gx = (g2 @ wt.T).reshape(B, T, C).transpose(0, 2, 1)
        gw = (rows.T @ g2).reshape(C, O, 2).transpose(1, 0, 2)
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record(out, parents, backward, "tconv1d")


def avg_pool1d(x: Tensor, k: int) -> Tensor:
    B, C, L = x.shape
    if k < 1 or L % k:
        raise ValueError(f"avg_pool1d: window {k} does not divide length {L}")
    if k == 1:
        return x
    out = x.data.reshape(B, C, L // k, k).mean(axis=3)

    def backward(g):
        return (np.repeat(g / g.dtype.type(k), k, axis=2),)

    return record(out, (x,), backward, "avg_pool")


def nn_upsample(x: Tensor, k: int) -> Tensor:
    if k < 1:
        raise ValueError(f"nn_upsample: factor must be >= 1, got {k}")
    if k == 1:
        return x
    B, C, L = x.shape
    out = np.repeat(x.data, k, axis=2)

    def backward(g):
        return (g.reshape(B, C, L, k).sum(axis=3),)

    return record(out, (x,), backward, "nn_upsample")


def pool_to(x: Tensor, length: int) -> Tensor:
    """Average-pool to ``length`` (window ``L / length``); length 1 is a global mean."""
    return avg_pool1d(x, x.shape[2] // length)


def upsample_to(x: Tensor, length: int) -> Tensor:
    if length % x.shape[2]:
        raise ValueError(f"cannot upsample length {x.shape[2]} to {length}")
    return nn_upsample(x, length // x.shape[2])


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of ``[B, C, L]`` or ``[B, C]`` input.

    Training mode normalizes with the biased batch statistics and updates the
    running buffers in place (unbiased variance, as is customary).
    """
    xv = x.data
    axes = (0, 2) if xv.ndim == 3 else (0,)
    view = (1, -1, 1) if xv.ndim == 3 else (1, -1)
    count = xv.size // xv.shape[1]
    if training:
        if count < 2:
            raise ValueError("batch_norm in training mode needs at least 2 values per channel")
        mean = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean = running_mean.astype(xv.dtype)
        var = running_var.astype(xv.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xv.dtype)
    xhat = (xv - mean.reshape(view)) * inv_std.reshape(view)
    out = xhat * gamma.data.reshape(view) + beta.data.reshape(view)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(view)
        if training:
            gx = (
                gxhat
                - gxhat.mean(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
            ) * inv_std.reshape(view)
        else:
            gx = gxhat * inv_std.reshape(view)
        return gx, gg, gb

    return record(out.astype(xv.dtype), (x, gamma, beta), backward, "batch_norm")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight`` shaped ``[F_out, F_in]``."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {list(x.shape)} incompatible with weight {list(weight.shape)}")
    xv, wv = x.data, weight.data
    out = xv @ wv.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        return g @ wv, g.T @ xv, (g.sum(axis=0) if bias is not None else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record(out, parents, backward, "linear")


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood over the batch.

    Accepts ``[B, K]`` logits, or ``[B, N, K]`` for per-point labels (the mean
    then runs over every point).
    """
    labels = np.asarray(labels, dtype=np.int64)
    K = logits.shape[-1]
    flat = logits.data.reshape(-1, K)
    lab = labels.reshape(-1)
    if lab.shape[0] != flat.shape[0]:
        raise ValueError(f"got {lab.shape[0]} labels for {flat.shape[0]} score rows")
    if lab.size and (lab.min() < 0 or lab.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    logp = log_softmax(flat)
    rows = np.arange(lab.size)
    loss = -logp[rows, lab].mean()
    shape = logits.shape

    def backward(g):
        grad = np.exp(logp)
        grad[rows, lab] -= 1
        return ((grad * (g / lab.size)).reshape(shape),)

    return record(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# -- modules -----------------------------------------------------------------

def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)


class Module:
    """Minimal container: parameters, buffers and child modules found by attribute walk."""

    training = True

    def __init__(self):
        self._buffer_names: list[str] = []

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        if "_buffer_names" not in self.__dict__:
            self._buffer_names = []
        self._buffer_names.append(name)
        setattr(self, name, value)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in self.__dict__.items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Module, Tensor)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Tensor)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            else:
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self.__dict__.get("_buffer_names", []):
            yield prefix + name, getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape))


class Conv1d(Module):
    """Kernel-1/stride-1, kernel-2/stride-2, or transposed kernel-2/stride-2."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, transposed: bool = False):
        super().__init__()
        if kernel not in (1, 2):
            raise ValueError("only kernel sizes 1 and 2 are supported")
        if transposed and kernel != 2:
            raise ValueError("transposed convolutions use kernel 2, stride 2")
        self.kernel = kernel
        self.stride = kernel
        self.transposed = transposed
        fan_in = c_in * (1 if transposed else kernel)
        self.weight = _uniform_init(rng, (c_out, c_in, kernel), fan_in)
        self.bias = parameter(np.zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        if self.transposed:
            return transposed_conv1d(x, self.weight, self.bias)
        return conv1d(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", np.zeros(channels, dtype=get_default_dtype()))
        self.register_buffer("running_var", np.ones(channels, dtype=get_default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class Linear(Module):
    def __init__(self, f_in: int, f_out: int, rng: np.random.Generator):
        super().__init__()
        self.weight = _uniform_init(rng, (f_out, f_in), f_in)
        self.bias = parameter(np.zeros(f_out))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


# -- optimization ------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update using each parameter's ``.grad``.

    Parameters without a gradient are treated as having a zero gradient.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("Adam state does not match the parameter list")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    step = state.lr * math.sqrt(1 - b2**t) / (1 - b1**t)
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        # epsilon applied to the bias-corrected second moment
        p.data -= (step * m / (np.sqrt(v) + state.eps * math.sqrt(1 - b2**t))).astype(p.data.dtype)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_schedule(epoch: int, base_lr: float, halve_every: int) -> float:
    """Step decay: halve the rate every ``halve_every`` epochs."""
    if halve_every < 1:
        raise ValueError("halve_every must be >= 1")
    return base_lr / 2 ** (epoch // halve_every)
