"""Minimal module system on top of :mod:`fundusfuse.tensor`."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import DTYPE, Tensor


class Module:
    """Parameter container with named traversal and a train/eval flag.

    Child modules, parameters (``Tensor`` with ``requires_grad``) and lists of
    modules are discovered from instance attributes in assignment order, so
    parameter names are stable across runs. Underscore attributes are private
    state and never traversed.
    """

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Module, Tensor)):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, item in enumerate(value):
                    yield f"{key}{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            else:
                yield from value.named_parameters(name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{key}", value
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        expected = set(params) | {name for name, _ in self.named_buffers()}
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise T.DimensionError(f"{name}: saved {state[name].shape} vs model {p.shape}")
            p.data[...] = state[name]
        self._load_buffers(state, "")

    def _load_buffers(self, state, prefix):
        for key in getattr(self, "_buffers", {}):
            self._buffers[key][...] = state[f"{prefix}{key}"]
        for key, value in self._children():
            if isinstance(value, Module):
                value._load_buffers(state, f"{prefix}{key}.")

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


def param(arr: np.ndarray) -> Tensor:
    return Tensor(arr.astype(DTYPE), requires_grad=True)


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True, std: Optional[float] = None):
        scale = std if std is not None else 1.0 / math.sqrt(n_in)
        self.weight = param(rng.normal(0.0, scale, (n_in, n_out)))
        self.bias = param(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, groups: int = 1, bias: bool = False):
        fan_in = (c_in // groups) * kernel * kernel
        # He-normal for SiLU-activated stacks
        self.weight = param(rng.normal(0.0, math.sqrt(2.0 / fan_in),
                                       (c_out, c_in // groups, kernel, kernel)))
        self.bias = param(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = (kernel - 1) // 2
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, self.stride, self.padding, self.groups)
        if self.bias is not None:
            y = y + T.reshape(self.bias, (1, -1, 1, 1))
        return y


class BatchNorm(Module):
    """Batch norm over channel axis 1; running stats blend with ``momentum``.

    ``running = momentum * running + (1 - momentum) * batch`` and the running
    variance uses the unbiased batch estimate.
    """

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.weight = param(np.ones(channels))
        self.bias = param(np.zeros(channels))
        self.momentum = momentum
        self.eps = eps
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=DTYPE),
            "running_var": np.ones(channels, dtype=DTYPE),
        }

    def forward(self, x: Tensor) -> Tensor:
        if not self.training:
            running = (self._buffers["running_mean"], self._buffers["running_var"])
            out, _, _ = T.batch_norm(x, self.weight, self.bias, self.eps, running)
            return out
        out, mu, var = T.batch_norm(x, self.weight, self.bias, self.eps)
        count = x.data.size // x.shape[1]
        unbiased = var * (count / max(count - 1, 1))
        m = self.momentum
        self._buffers["running_mean"][...] = m * self._buffers["running_mean"] + (1 - m) * mu
        self._buffers["running_var"][...] = m * self._buffers["running_var"] + (1 - m) * unbiased
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)
