"""Convolutional (local) stream: bottom-up encoder, top-down decoder with per-stage lateral merges."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.nn import Conv2d, ConvNormAct, GroupNorm, Module
from .autodiff.tensor import Tensor
from .config import ModelConfig


@dataclass
class LocalStageOutputs:
    down: list[Tensor]  # F_down^1..4
    up: list[Tensor]  # F_up^1..4 (index 0 is level 1)
    merged: dict[int, Tensor]  # F_l^i for i = 2, 3, 4


def downsample2(x: Tensor) -> Tensor:
    """2x2 max pool; odd extents are edge-padded first so every pixel is covered."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        x = ops.pad2d(x, (0, h % 2, 0, w % 2), mode="edge")
    return ops.max_pool2d(x, 2)


class EncoderStage(Module):
    """Two 3x3 conv+norm+relu blocks, then a stride-2 downsample."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, blocks: int = 2) -> None:
        self.blocks = [ConvNormAct(c_in if i == 0 else c_out, c_out, 3, rng) for i in range(blocks)]

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return downsample2(x)


class StageMerge(Module):
    """Channel concat of (down, up) followed by 1x1 conv back to the stage width.

    ``mode='sum'`` adds the two maps instead and has no parameters.
    """

    def __init__(self, channels: int, rng: np.random.Generator, mode: str = "concat",
                 norm_act: bool = True) -> None:
        self.mode = mode
        self.norm_act = norm_act
        if mode == "concat":
            self.proj = Conv2d(2 * channels, channels, 1, rng)
            self.norm = GroupNorm(channels) if norm_act else None

    def forward(self, down: Tensor, up: Tensor) -> Tensor:
        if down.shape != up.shape:
            raise RuntimeError(f"encoder/decoder misconfigured: {down.shape} vs {up.shape}")
        if self.mode == "sum":
            return down + up
        y = self.proj(ops.concat_channels([down, up]))
        if self.norm_act:
            y = ops.relu(self.norm(y))
        return y


class LocalStream(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        chans = cfg.local_channels
        self.encoder = [EncoderStage(cfg.in_channels if i == 0 else chans[i - 1], chans[i], rng)
                        for i in range(4)]
        self.center = ConvNormAct(chans[3], chans[3], 3, rng)
        # up path: level i+1 -> level i, halving channels
        self.up_convs = [ConvNormAct(chans[i + 1], chans[i], 3, rng) for i in range(3)]
        self.merges = [StageMerge(chans[i], rng, mode=cfg.local_merge) for i in (1, 2, 3)]

    def encode(self, image: Tensor) -> list[Tensor]:
        feats = []
        x = image
        for stage in self.encoder:
            x = stage(x)
            feats.append(x)
        return feats

    def decode(self, down: list[Tensor]) -> tuple[list[Tensor], dict[int, Tensor]]:
        """Top-down pass from F_down^4 with lateral merges.

        F_up^4 = center(F_down^4); each merged F_l^i is upsampled and convolved
        into F_up^(i-1).  Returns ([F_up^1..F_up^4], {i: F_l^i for i = 2, 3, 4}).
        """
        up: list = [None, None, None, self.center(down[3])]
        merged: dict[int, Tensor] = {}
        for i in (2, 1, 0):
            lvl = i + 2
            merged[lvl] = self.merges[lvl - 2](down[lvl - 1], up[lvl - 1])
            up[i] = self.up_convs[i](ops.upsample_like(merged[lvl], down[i]))
        return up, merged

    def forward(self, image: Tensor) -> LocalStageOutputs:
        down = self.encode(image)
        up, merged = self.decode(down)
        return LocalStageOutputs(down, up, merged)

    def level_features(self, out: LocalStageOutputs) -> list[Tensor]:
        """Per-level local features fed to the fusion module: F_down^1, F_l^2, F_l^3, F_l^4."""
        return [out.down[0], out.merged[2], out.merged[3], out.merged[4]]
