"""Body/edge decoupling head.

A flow field predicted from the fused feature warps it toward coarse
"pseudo-cluster" centres (the body); the residual against the original, joined
with the finest fused level, becomes the edge feature.  The final feature is
their sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.nn import Conv2d, Module
from .autodiff.tensor import Tensor


@dataclass
class DecoupledFeatures:
    flow: Tensor
    body: Tensor
    edge: Tensor
    final: Tensor


class FlowField(Module):
    def __init__(self, channels: int, rng: np.random.Generator) -> None:
        self.down1 = Conv2d(channels, channels, 3, rng, stride=2, padding=1)
        self.down2 = Conv2d(channels, channels, 3, rng, stride=2, padding=1)
        # zero init: the first forward pass warps by exactly zero
        self.gamma = Conv2d(2 * channels, 2, 3, rng).zero_()

    def forward(self, f_fuse: Tensor) -> Tensor:
        h, w = f_fuse.shape[2:]
        coarse = self.down2(ops.relu(self.down1(f_fuse)))
        up = ops.bilinear_resize(coarse, h, w)
        return self.gamma(ops.concat_channels([up, f_fuse]))


def warp_body(f_fuse: Tensor, flow: Tensor) -> Tensor:
    return ops.grid_sample(f_fuse, flow)


class EdgeSplit(Module):
    """Residual (fuse - body) joined with the projected low-level feature, 3x3 conv back to width."""

    def __init__(self, channels: int, low_channels: int, rng: np.random.Generator) -> None:
        self.low_proj = Conv2d(low_channels, channels, 1, rng)
        self.conv = Conv2d(2 * channels, channels, 3, rng)

    def forward(self, f_fuse: Tensor, f_body: Tensor, f_low: Tensor) -> Tensor:
        h, w = f_fuse.shape[2:]
        low = self.low_proj(ops.bilinear_resize(f_low, h, w))
        return self.conv(ops.concat_channels([f_fuse - f_body, low]))


def recombine(f_edge: Tensor, f_body: Tensor) -> Tensor:
    return f_edge + f_body


class EdgeDecoupler(Module):
    def __init__(self, channels: int, low_channels: int, rng: np.random.Generator) -> None:
        self.flow = FlowField(channels, rng)
        self.edge = EdgeSplit(channels, low_channels, rng)

    def forward(self, f_fuse: Tensor, f_low: Tensor) -> DecoupledFeatures:
        flow = self.flow(f_fuse)
        body = warp_body(f_fuse, flow)
        edge = self.edge(f_fuse, body, f_low)
        return DecoupledFeatures(flow, body, edge, recombine(edge, body))


class PredictionHead(Module):
    """1x1 conv to one logit channel, bilinearly resized to the image extent."""

    def __init__(self, channels: int, rng: np.random.Generator) -> None:
        self.conv = Conv2d(channels, 1, 1, rng)

    def forward(self, x: Tensor, out_hw: tuple[int, int]) -> Tensor:
        return ops.bilinear_resize(self.conv(x), *out_hw)


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) > threshold).astype(np.uint8)
