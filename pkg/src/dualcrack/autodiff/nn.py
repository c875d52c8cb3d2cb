"""Parameter containers and the basic layers built on the op library."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor


class Parameter(Tensor):
    def __init__(self, data, dtype=None) -> None:
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Minimal module tree: attributes that are Parameters, Modules or lists of Modules."""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def kaiming_init(rng: np.random.Generator, shape, fan: int, dtype=np.float32) -> np.ndarray:
    """He-normal, std sqrt(2 / fan)."""
    return rng.normal(0.0, math.sqrt(2.0 / fan), size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True) -> None:
        self.weight = Parameter(uniform_init(rng, (d_out, d_in), d_in))
        self.bias = Parameter(uniform_init(rng, (d_out,), d_in)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: Optional[int] = None, bias: bool = True,
                 groups: int = 1) -> None:
        fan_out = (c_out // groups) * kernel * kernel
        self.weight = Parameter(kaiming_init(rng, (c_out, c_in // groups, kernel, kernel), fan_out))
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32)) if bias else None
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def zero_(self) -> "Conv2d":
        self.weight.data[...] = 0
        if self.bias is not None:
            self.bias.data[...] = 0
        return self


class LayerNorm(Module):
    """Normalises the last axis."""

    def __init__(self, dim: int) -> None:
        self.gain = Parameter(np.ones(dim, dtype=np.float32))
        self.shift = Parameter(np.zeros(dim, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.shift)


class ChannelLayerNorm(Module):
    """Layer norm over the channel axis of a B,C,H,W tensor."""

    def __init__(self, dim: int) -> None:
        self.norm = LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(x.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)


def norm_groups(channels: int, max_groups: int = 4) -> int:
    g = min(max_groups, max(1, channels // 2))
    while channels % g:
        g -= 1
    return g


class GroupNorm(Module):
    def __init__(self, channels: int, groups: Optional[int] = None) -> None:
        self.groups = groups or norm_groups(channels)
        self.gain = Parameter(np.ones(channels, dtype=np.float32))
        self.shift = Parameter(np.zeros(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.groups, self.gain, self.shift)


class ConvNormAct(Module):
    """conv -> group norm -> relu."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1) -> None:
        self.conv = Conv2d(c_in, c_out, kernel, rng, stride=stride)
        self.norm = GroupNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.norm(self.conv(x)))
