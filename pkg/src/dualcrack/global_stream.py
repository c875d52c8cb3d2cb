"""Transformer (global) stream: patch embedding, cross-shaped window attention
blocks in four stages, and pyramid fusion of the stage outputs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import ops
from .autodiff.nn import ChannelLayerNorm, Conv2d, ConvNormAct, LayerNorm, Linear, Module
from .autodiff.ops import ConfigurationError
from .autodiff.tensor import Tensor
from .config import ModelConfig, effective_stripe


@dataclass
class GlobalStageOutputs:
    stages: list[Tensor]  # X_g^1..X_g^4, each B,C,H,W
    fused: Tensor  # X_g


class PatchEmbed(Module):
    """Overlapping 7x7 stride-4 convolution followed by a channel layer norm."""

    def __init__(self, c_in: int, dim: int, rng: np.random.Generator) -> None:
        self.proj = Conv2d(c_in, dim, 7, rng, stride=4, padding=3)
        self.norm = ChannelLayerNorm(dim)

    def forward(self, image: Tensor) -> Tensor:
        return self.norm(self.proj(image))


def _to_windows(t: Tensor, axis_is_row: bool, s: int, heads: int) -> Tensor:
    """[B,h,w,c] -> [B*n_win, heads, tokens, d]."""
    b, h, w, c = t.shape
    d = c // heads
    if axis_is_row:
        t = t.reshape(b, h // s, s, w, heads, d)
        t = t.transpose(0, 1, 4, 2, 3, 5)
        return t.reshape(b * (h // s), heads, s * w, d)
    t = t.reshape(b, h, w // s, s, heads, d)
    t = t.transpose(0, 2, 4, 1, 3, 5)
    return t.reshape(b * (w // s), heads, h * s, d)


def _from_windows(t: Tensor, axis_is_row: bool, s: int, b: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`_to_windows`."""
    heads, d = t.shape[1], t.shape[3]
    if axis_is_row:
        t = t.reshape(b, h // s, heads, s, w, d).transpose(0, 1, 3, 4, 2, 5)
    else:
        t = t.reshape(b, w // s, heads, h, s, d).transpose(0, 3, 1, 4, 2, 5)
    return t.reshape(b, h, w, heads * d)


def _window_grid(t: Tensor, axis_is_row: bool, s: int) -> Tensor:
    """[B,h,w,c] -> [B*n_win, c, win_h, win_w] for the positional conv."""
    b, h, w, c = t.shape
    if axis_is_row:
        t = t.reshape(b, h // s, s, w, c).transpose(0, 1, 4, 2, 3)
        return t.reshape(b * (h // s), c, s, w)
    t = t.reshape(b, h, w // s, s, c).transpose(0, 2, 4, 1, 3)
    return t.reshape(b * (w // s), c, h, s)


class CrossWindowAttention(Module):
    """Multi-head self-attention over cross-shaped windows.

    The first half of the heads attends within horizontal stripes of height
    ``s`` (full image width), the second half within vertical stripes of width
    ``s``.  A depthwise 3x3 convolution on V inside each stripe supplies
    positional information when ``lepe`` is on.
    """

    def __init__(self, dim: int, heads: int, stripe: int, rng: np.random.Generator,
                 lepe: bool = True) -> None:
        if heads % 2 or dim % heads:
            raise ConfigurationError(f"dim {dim} / heads {heads} must split evenly into two branches")
        self.dim = dim
        self.heads = heads
        self.stripe = stripe
        self.scale = (dim // heads) ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        half = dim // 2
        self.lepe = [Conv2d(half, half, 3, rng, groups=half) for _ in range(2)] if lepe else []

    def stripes(self, h: int, w: int) -> tuple[int, int]:
        sh = effective_stripe(self.stripe, h)
        sw = effective_stripe(self.stripe, w)
        if h % sh or w % sw:
            raise ConfigurationError(f"stripe width {self.stripe} does not divide {h}x{w}")
        return sh, sw

    def forward(self, x: Tensor, record: Optional[list] = None) -> Tensor:
        """``x`` is token-major [B,h,w,C]; returns the same shape.

        When ``record`` is a list, per-branch attention weights are appended to it.
        """
        b, h, w, c = x.shape
        sh, sw = self.stripes(h, w)
        qkv = self.qkv(x)
        half = c // 2
        nh = self.heads // 2
        outs = []
        for branch, (is_row, s) in enumerate(((True, sh), (False, sw))):
            lo = branch * half
            q = ops.slice_axis(qkv, lo, lo + half, -1)
            k = ops.slice_axis(qkv, c + lo, c + lo + half, -1)
            v = ops.slice_axis(qkv, 2 * c + lo, 2 * c + lo + half, -1)
            qw = _to_windows(q, is_row, s, nh)
            kw = _to_windows(k, is_row, s, nh)
            vw = _to_windows(v, is_row, s, nh)
            logits = ops.matmul(qw, kw.transpose(0, 1, 3, 2)) * self.scale
            attn = ops.softmax(logits, axis=-1)
            if record is not None:
                record.append((is_row, s, attn.data))
            out = _from_windows(ops.matmul(attn, vw), is_row, s, b, h, w)
            if self.lepe:
                grid = _window_grid(v, is_row, s)
                pos = self.lepe[branch](grid)
                if is_row:
                    pos = pos.reshape(b, h // s, half, s, w).transpose(0, 1, 3, 4, 2)
                else:
                    pos = pos.reshape(b, w // s, half, h, s).transpose(0, 3, 1, 4, 2)
                out = out + pos.reshape(b, h, w, half)
            outs.append(out)
        return self.proj(ops.concat(outs, axis=-1))

    def attention_matrix(self, x: Tensor) -> np.ndarray:
        """Dense [B, heads, N, N] attention weights over row-major tokens (N = h*w)."""
        b, h, w, c = x.shape
        rec: list = []
        self.forward(x, record=rec)
        n = h * w
        nh = self.heads // 2
        dense = np.zeros((b, self.heads, n, n), dtype=x.dtype)
        tok = np.arange(n).reshape(h, w)
        for branch, (is_row, s, attn) in enumerate(rec):
            if is_row:
                ids = tok.reshape(h // s, s * w)
            else:
                ids = tok.reshape(h, w // s, s).transpose(1, 0, 2).reshape(w // s, h * s)
            n_win = ids.shape[0]
            attn = attn.reshape(b, n_win, nh, ids.shape[1], ids.shape[1])
            for wi in range(n_win):
                sel = ids[wi]
                for hh in range(nh):
                    dense[:, branch * nh + hh, sel[:, None], sel[None, :]] = attn[:, wi, hh]
        return dense


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator) -> None:
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class TBlock(Module):
    """Pre-norm transformer block: attention residual then MLP residual."""

    def __init__(self, dim: int, heads: int, stripe: int, mlp_ratio: int,
                 rng: np.random.Generator, lepe: bool = True) -> None:
        self.norm1 = LayerNorm(dim)
        self.attn = CrossWindowAttention(dim, heads, stripe, rng, lepe=lepe)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = self.attn(self.norm1(x)) + x
        return self.mlp(self.norm2(x)) + x


class StageTransition(Module):
    """3x3 stride-2 convolution: halves the spatial extent, doubles channels."""

    def __init__(self, dim: int, rng: np.random.Generator) -> None:
        self.conv = Conv2d(dim, 2 * dim, 3, rng, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class GlobalFuse(Module):
    """Project each stage to c_f channels, upsample to stage-1 size, concat, 3x3 fuse."""

    def __init__(self, stage_channels, c_f: int, rng: np.random.Generator) -> None:
        self.lateral = [Conv2d(c, c_f, 1, rng) for c in stage_channels]
        self.fuse = ConvNormAct(4 * c_f, 4 * c_f, 3, rng)

    def forward(self, stages: list[Tensor]) -> Tensor:
        ref = stages[0]
        ups = [ops.upsample_like(lat(x), ref) for lat, x in zip(self.lateral, stages)]
        return self.fuse(ops.concat_channels(ups))


class GlobalStream(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        chans = cfg.stage_channels
        self.embed = PatchEmbed(cfg.in_channels, chans[0], rng)
        self.stages = []
        self.transitions = []
        for i in range(4):
            if i:
                self.transitions.append(StageTransition(chans[i - 1], rng))
            blocks = [TBlock(chans[i], cfg.heads[i], cfg.stripe_widths[i], cfg.mlp_ratio, rng,
                             lepe=cfg.lepe) for _ in range(cfg.depths[i])]
            self.stages.append(_Stage(blocks))
        self.fuse = GlobalFuse(chans, cfg.c_f, rng)

    def forward(self, image: Tensor) -> GlobalStageOutputs:
        x = self.embed(image)
        outs = []
        for i, stage in enumerate(self.stages):
            if i:
                x = self.transitions[i - 1](x)
            x = stage(x)
            outs.append(x)
        return GlobalStageOutputs(outs, self.fuse(outs))


class _Stage(Module):
    def __init__(self, blocks: list[TBlock]) -> None:
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        t = x.transpose(0, 2, 3, 1)
        for blk in self.blocks:
            t = blk(t)
        return t.transpose(0, 3, 1, 2)
