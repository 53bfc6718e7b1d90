"""Parameterised building blocks: a small Module base plus conv, linear and batch-norm."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import BatchNormState, Tensor


class Module:
    """Registers Tensor parameters, child modules and numpy buffers in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, owner, attr: str) -> None:
        """Expose ``owner.attr`` (a numpy array) under ``name`` for checkpointing."""
        self._buffers[name] = (owner, attr)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, (owner, attr) in self._buffers.items():
            yield prefix + name, getattr(owner, attr)
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if rest and head in self._children:
            self._children[head].set_buffer(rest, value)
            return
        owner, attr = self._buffers[dotted]
        setattr(owner, attr, np.array(value, dtype=getattr(owner, attr).dtype))

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name in buffers:
            self.set_buffer(name, state[name])

    def to(self, dtype) -> "Module":
        """Cast parameters in place (float64 is used by the finite-difference checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: tuple[int, int], rng: np.random.Generator):
        super().__init__()
        kh, kw = kernel
        if kh <= 0 or kw <= 0:
            raise ConfigError(f"kernel extents must be positive, got {kernel}")
        fan_in = c_in * kh * kw
        self.c_in, self.c_out, self.kernel = c_in, c_out, (kh, kw)
        self.weight = param(kaiming_uniform(rng, (c_out, c_in, kh, kw), fan_in))
        self.bias = param(rng.uniform(-1, 1, size=c_out).astype(np.float32) / math.sqrt(fan_in))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d_same(x, self.weight, self.bias)


class Linear(Module):
    """y = x W^T + b over the last axis; leading axes are batch."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = param(kaiming_uniform(rng, (n_out, n_in), n_in))
        self.bias = param(rng.uniform(-1, 1, size=n_out).astype(np.float32) / math.sqrt(n_in))

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(x, T.transpose_last(self.weight)) + self.bias


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.weight = param(np.ones(channels, dtype=np.float32))
        self.bias = param(np.zeros(channels, dtype=np.float32))
        self.state = BatchNormState(channels, momentum, eps)
        self.register_buffer("running_mean", self.state, "running_mean")
        self.register_buffer("running_var", self.state, "running_var")

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.weight, self.bias, self.state, self.training)
