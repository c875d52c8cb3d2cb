"""Full dual-stream segmentation network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import ops
from .autodiff.nn import ConvNormAct, Module
from .autodiff.tensor import Tensor
from .cofuse import CoFuseLevel, FusedLevel
from .config import ModelConfig
from .decoupling import DecoupledFeatures, EdgeDecoupler, PredictionHead
from .global_stream import GlobalStageOutputs, GlobalStream
from .local_stream import LocalStageOutputs, LocalStream


@dataclass
class ModelOutputs:
    final_logits: Tensor
    global_logits: Tensor
    local_logits: Tensor
    edge_logits: Optional[Tensor]
    body_logits: Optional[Tensor]
    global_feats: GlobalStageOutputs
    local_feats: LocalStageOutputs
    levels: list[FusedLevel]
    fused: Tensor
    decoupled: Optional[DecoupledFeatures]


class DualFlowNet(Module):
    """Global transformer stream + local conv stream, fused per level, decoded
    through the optional body/edge head."""

    def __init__(self, cfg: ModelConfig) -> None:
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.width
        gch = 4 * cfg.c_f
        self.global_stream = GlobalStream(cfg, rng)
        self.local_stream = LocalStream(cfg, rng)
        self.levels = [
            CoFuseLevel(gch, c, d, cfg.se_reduction, rng, gf_filter=cfg.gf_filter,
                        lf_filter=cfg.lf_filter, corr_fuse=cfg.corr_fuse,
                        softmax_axis=cfg.corr_softmax_axis)
            for c in cfg.local_channels
        ]
        self.aggregate = ConvNormAct(4 * d, d, 3, rng)
        self.decm = EdgeDecoupler(d, d, rng) if cfg.decm else None
        self.final_head = PredictionHead(d, rng)
        self.body_head = PredictionHead(d, rng) if cfg.decm else None
        self.edge_head = PredictionHead(d, rng) if cfg.decm else None
        self.global_head = PredictionHead(gch, rng)
        self.local_head = PredictionHead(cfg.local_channels[0], rng)

    def forward(self, image: Tensor) -> ModelOutputs:
        hw = image.shape[2:]
        g = self.global_stream(image)
        loc = self.local_stream(image)
        levels = [lvl(f, g.fused) for lvl, f in
                  zip(self.levels, self.local_stream.level_features(loc))]
        ref = levels[0].fused
        fused = self.aggregate(ops.concat_channels([ops.upsample_like(lv.fused, ref) for lv in levels]))
        dec = None
        edge_logits = body_logits = None
        if self.decm is not None:
            dec = self.decm(fused, ref)
            final_logits = self.final_head(dec.final, hw)
            edge_logits = self.edge_head(dec.edge, hw)
            body_logits = self.body_head(dec.body, hw)
        else:
            final_logits = self.final_head(fused, hw)
        return ModelOutputs(
            final_logits=final_logits,
            global_logits=self.global_head(g.fused, hw),
            local_logits=self.local_head(loc.up[0], hw),
            edge_logits=edge_logits,
            body_logits=body_logits,
            global_feats=g,
            local_feats=loc,
            levels=levels,
            fused=fused,
            decoupled=dec,
        )

    def predict_proba(self, image: np.ndarray) -> np.ndarray:
        """Final-head crack probabilities [B,1,H,W] for a float image batch."""
        x = Tensor(np.asarray(image, dtype=self.dtype))
        return ops.sigmoid(self.forward(x).final_logits).data

    @property
    def dtype(self):
        return self.final_head.conv.weight.dtype


def build_model(cfg: ModelConfig, dtype=np.float32) -> DualFlowNet:
    model = DualFlowNet(cfg)
    if np.dtype(dtype) != np.float32:
        model.astype(dtype)
    return model
