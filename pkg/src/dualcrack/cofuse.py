"""Per-level interaction between the global and local streams.

Each level aligns the fused global feature to the local level, refines the
global side with channel attention and the local side with spatial attention,
and mixes the pair through a softmax correlation map.  The three refinements can
be switched off independently for ablations; with all three off the level
reduces to a 1x1 convolution over the plain concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import ops
from .autodiff.nn import Conv2d, Linear, Module, Parameter, uniform_init
from .autodiff.tensor import Tensor


@dataclass
class FusedLevel:
    fused: Tensor  # F_fuse^i at the working width
    corr_map: Optional[Tensor]  # None when correlation fusion is bypassed


class Align(Module):
    """1x1 projection to the local channel width, then bilinear resize to its extent."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator) -> None:
        self.proj = Conv2d(c_in, c_out, 1, rng)

    def forward(self, x_g: Tensor, target_hw: tuple[int, int]) -> Tensor:
        return ops.bilinear_resize(self.proj(x_g), *target_hw)


class ChannelAttention(Module):
    """Squeeze-and-excitation gate: ``x * sigmoid(W2 relu(W1 avg(x)))``."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator) -> None:
        if channels % reduction:
            raise ValueError(f"reduction {reduction} does not divide {channels}")
        hidden = channels // reduction
        self.w1 = Parameter(uniform_init(rng, (hidden, channels), channels))
        self.w2 = Parameter(uniform_init(rng, (channels, hidden), hidden))

    def squeeze(self, x: Tensor) -> Tensor:
        return ops.global_avg_pool(x)

    def gate(self, x: Tensor) -> Tensor:
        b, c = x.shape[:2]
        z = self.squeeze(x).reshape(b, c)
        s = ops.sigmoid(ops.linear(ops.relu(ops.linear(z, self.w1)), self.w2))
        return s.reshape(b, c, 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


class SpatialAttention(Module):
    """Gate from a 7x7 conv over the channelwise mean and max maps."""

    def __init__(self, rng: np.random.Generator, kernel: int = 7) -> None:
        self.conv = Conv2d(2, 1, kernel, rng, bias=False)

    def gate(self, x: Tensor) -> Tensor:
        avg = ops.mean(x, axis=1, keepdims=True)
        mx = ops.amax(x, axis=1, keepdims=True)
        return ops.sigmoid(self.conv(ops.concat_channels([avg, mx])))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


class CorrelationFuse(Module):
    """Per-position MLP over [local, global] channels, softmax into a correlation
    map that reweights the concatenation; a 1x1 conv sets the output width."""

    def __init__(self, channels: int, out_channels: int, rng: np.random.Generator,
                 softmax_axis: str = "channel") -> None:
        cat = 2 * channels
        self.fc1 = Linear(cat, cat // 2, rng)
        self.fc2 = Linear(cat // 2, cat, rng)
        self.softmax_axis = softmax_axis
        self.proj = Conv2d(cat, out_channels, 1, rng)

    def correlation(self, f_cat: Tensor) -> Tensor:
        tokens = f_cat.transpose(0, 2, 3, 1)
        logits = self.fc2(ops.relu(self.fc1(tokens))).transpose(0, 3, 1, 2)
        if self.softmax_axis == "channel":
            return ops.softmax(logits, axis=1)
        b, c, h, w = logits.shape
        return ops.softmax(logits.reshape(b, c, h * w), axis=-1).reshape(b, c, h, w)

    def forward(self, f_local: Tensor, x_global: Tensor) -> FusedLevel:
        if f_local.shape[2:] != x_global.shape[2:]:
            raise RuntimeError(f"spatial mismatch {f_local.shape} vs {x_global.shape}")
        f_cat = ops.concat_channels([f_local, x_global])
        corr = self.correlation(f_cat)
        return FusedLevel(self.proj(corr * f_cat), corr)


class CoFuseLevel(Module):
    def __init__(self, global_channels: int, local_channels: int, out_channels: int,
                 reduction: int, rng: np.random.Generator, gf_filter: bool = True,
                 lf_filter: bool = True, corr_fuse: bool = True,
                 softmax_axis: str = "channel") -> None:
        self.align = Align(global_channels, local_channels, rng)
        self.channel_attn = ChannelAttention(local_channels, reduction, rng) if gf_filter else None
        self.spatial_attn = SpatialAttention(rng) if lf_filter else None
        if corr_fuse:
            self.corr = CorrelationFuse(local_channels, out_channels, rng, softmax_axis)
            self.plain = None
        else:
            self.corr = None
            self.plain = Conv2d(2 * local_channels, out_channels, 1, rng)

    def forward(self, f_local: Tensor, x_g: Tensor) -> FusedLevel:
        g = self.align(x_g, f_local.shape[2:])
        if self.channel_attn is not None:
            g = self.channel_attn(g)
        loc = self.spatial_attn(f_local) if self.spatial_attn is not None else f_local
        if self.corr is not None:
            return self.corr(loc, g)
        return FusedLevel(self.plain(ops.concat_channels([loc, g])), None)
