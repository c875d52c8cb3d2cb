"""Finite-difference gradient suite over ops, composite blocks and a tiny full model.

Everything runs in float64 on seeded inputs.  ``run_scope`` returns one
:class:`GradReport` per case; ``failures`` filters those above threshold.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import ops
from .autodiff.gradcheck import GradReport, finite_diff_check, projected
from .autodiff.tensor import Tensor
from .cofuse import ChannelAttention, CoFuseLevel, CorrelationFuse, SpatialAttention
from .config import ModelConfig
from .decoupling import EdgeDecoupler, FlowField, warp_body
from .global_stream import CrossWindowAttention, GlobalFuse, PatchEmbed, TBlock
from .local_stream import LocalStream, StageMerge
from .model import build_model
from .objective import (PredictionBundle, bce_loss, derive_edge_gt, edge_loss, iou_loss,
                        total_loss)

SCOPES = ("ops", "blocks", "model")
THRESHOLDS = {"ops": 1e-5, "blocks": 1e-5, "model": 1e-3}

F64 = np.float64


@dataclass
class GradCase:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]
    max_entries: Optional[int] = None
    scale: str = "per_input"


def _t(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=F64)


def _const(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=F64))


def _unary(op, lo=-1.0, hi=1.0, shape=(2, 3, 4)):
    def build(rng):
        return projected(op), [_t(rng, *shape, lo=lo, hi=hi)]
    return build


def _binary(op, shape_a=(2, 3, 4), shape_b=(2, 3, 4), lo_b=-1.0, hi_b=1.0):
    def build(rng):
        return projected(op), [_t(rng, *shape_a), _t(rng, *shape_b, lo=lo_b, hi=hi_b)]
    return build


def _distinct(rng, *shape) -> Tensor:
    """Values with no near-ties, so max/relu selections are stable under eps."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2) / n + rng.uniform(0.1, 0.4) / n
    return Tensor(vals.reshape(shape), requires_grad=True, dtype=F64)


def _module_case(make, in_shapes, call=None, max_entries=None):
    """Check w.r.t. the inputs and every module parameter."""

    def build(rng):
        mod = make(rng).astype(F64)
        xs = [_t(rng, *s) for s in in_shapes]
        params = mod.parameters()

        def fn(*args):
            inputs = args[:len(xs)]
            out = call(mod, *inputs) if call else mod(*inputs)
            return out

        return projected(fn), xs + params

    return build


def op_cases() -> list[GradCase]:
    c = [
        GradCase("add_broadcast", _binary(ops.add, (2, 3, 4), (3, 1))),
        GradCase("sub", _binary(ops.sub)),
        GradCase("mul_broadcast", _binary(ops.mul, (2, 3, 4), (4,))),
        GradCase("div", _binary(ops.div, lo_b=0.5, hi_b=2.0)),
        GradCase("neg", _unary(ops.neg)),
        GradCase("power", _unary(lambda x: ops.power(x, 3.0), lo=0.2, hi=1.5)),
        GradCase("exp", _unary(ops.exp)),
        GradCase("log", _unary(ops.log, lo=0.2, hi=2.0)),
        GradCase("clip", _unary(lambda x: ops.clip(x, -0.5, 0.5))),
        GradCase("relu", lambda rng: (projected(ops.relu), [_distinct(rng, 2, 3, 4)])),
        GradCase("sigmoid", _unary(ops.sigmoid, lo=-4, hi=4)),
        GradCase("gelu", _unary(ops.gelu, lo=-3, hi=3)),
        GradCase("softmax", _unary(lambda x: ops.softmax(x, axis=-1))),
        GradCase("softmax_axis1", _unary(lambda x: ops.softmax(x, axis=1))),
        GradCase("sum", _unary(lambda x: ops.sum(x, axis=(0, 2)))),
        GradCase("mean", _unary(lambda x: ops.mean(x, axis=1, keepdims=True))),
        GradCase("amax", lambda rng: (projected(lambda x: ops.amax(x, axis=1)), [_distinct(rng, 2, 3, 4)])),
        GradCase("reshape", _unary(lambda x: ops.reshape(x, (6, 4)))),
        GradCase("transpose", _unary(lambda x: ops.transpose(x, (2, 0, 1)))),
        GradCase("getitem", _unary(lambda x: ops.getitem(x, (slice(None), [0, 2, 0], slice(1, 3))))),
        GradCase("slice_axis", _unary(lambda x: ops.slice_axis(x, 1, 3, -1))),
        GradCase("concat", _binary(lambda a, b: ops.concat([a, b], axis=1), (2, 3, 4), (2, 2, 4))),
        GradCase("take", _unary(lambda x: ops.take(x, np.array([2, 0, 0, 1]), axis=1))),
        GradCase("pad2d_constant", _unary(lambda x: ops.pad2d(x, (1, 0, 2, 1)), shape=(1, 2, 3, 3))),
        GradCase("pad2d_edge", _unary(lambda x: ops.pad2d(x, (1, 2, 0, 1), mode="edge"), shape=(1, 2, 3, 3))),
        GradCase("matmul_batched", _binary(ops.matmul, (2, 3, 4), (4, 5))),
        GradCase("linear", lambda rng: (projected(ops.linear), [_t(rng, 2, 3, 4), _t(rng, 5, 4), _t(rng, 5)])),
        GradCase("conv2d", lambda rng: (projected(lambda x, w, b: ops.conv2d(x, w, b, 1, 1)),
                                        [_t(rng, 2, 3, 5, 5), _t(rng, 4, 3, 3, 3), _t(rng, 4)])),
        GradCase("conv2d_stride2", lambda rng: (projected(lambda x, w: ops.conv2d(x, w, None, 2, 1)),
                                                [_t(rng, 1, 2, 6, 5), _t(rng, 3, 2, 3, 3)])),
        GradCase("conv2d_grouped", lambda rng: (projected(lambda x, w: ops.conv2d(x, w, None, 1, 1, 2)),
                                                [_t(rng, 1, 4, 4, 4), _t(rng, 6, 2, 3, 3)])),
        GradCase("conv2d_depthwise", lambda rng: (projected(lambda x, w, b: ops.conv2d(x, w, b, 1, 1, 3)),
                                                  [_t(rng, 2, 3, 4, 4), _t(rng, 3, 1, 3, 3), _t(rng, 3)])),
        GradCase("avg_pool2d", _unary(lambda x: ops.avg_pool2d(x, 2), shape=(1, 2, 4, 4))),
        GradCase("max_pool2d", lambda rng: (projected(lambda x: ops.max_pool2d(x, 2)), [_distinct(rng, 1, 2, 4, 4)])),
        GradCase("global_avg_pool", _unary(ops.global_avg_pool, shape=(2, 3, 3, 3))),
        GradCase("layer_norm", lambda rng: (projected(ops.layer_norm), [_t(rng, 2, 3, 5), _t(rng, 5), _t(rng, 5)])),
        GradCase("group_norm", lambda rng: (projected(lambda x, g, s: ops.group_norm(x, 2, g, s)),
                                            [_t(rng, 2, 4, 3, 3), _t(rng, 4), _t(rng, 4)])),
        GradCase("bilinear_up", _unary(lambda x: ops.bilinear_resize(x, 7, 6), shape=(1, 2, 3, 4))),
        GradCase("bilinear_down", _unary(lambda x: ops.bilinear_resize(x, 3, 2), shape=(1, 2, 7, 5))),
        GradCase("grid_sample", lambda rng: (projected(ops.grid_sample),
                                             [_t(rng, 2, 3, 4, 5), _t(rng, 2, 2, 4, 5, lo=-1.7, hi=1.7)])),
    ]
    return c


def _loss_case(loss_fn, shape=(2, 1, 4, 4)):
    def build(rng):
        y = _const(rng.random(shape) < 0.4)
        return (lambda p: loss_fn(p, y.data)), [_t(rng, *shape, lo=0.05, hi=0.95)]
    return build


def _total_loss_case(rng):
    y = (rng.random((2, 1, 6, 6)) < 0.4).astype(F64)
    ye = derive_edge_gt(y[:, 0])[:, None].astype(F64)
    probs = [_t(rng, 2, 1, 6, 6, lo=0.05, hi=0.95) for _ in range(4)]

    def fn(a, b, c, d):
        loss, _ = total_loss(PredictionBundle(a, b, c, d), y, ye)
        return loss

    return fn, probs


def block_cases() -> list[GradCase]:
    return [
        GradCase("patch_embed", _module_case(lambda r: PatchEmbed(3, 4, r), [(1, 3, 8, 8)]), 40),
        GradCase("cross_window_attention",
                 _module_case(lambda r: CrossWindowAttention(8, 2, 2, r), [(1, 4, 4, 8)]), 40),
        GradCase("tblock", _module_case(lambda r: TBlock(8, 2, 1, 2, r), [(1, 4, 4, 8)]), 40),
        GradCase("global_fuse",
                 _module_case(lambda r: GlobalFuse((2, 4, 4, 4), 2, r),
                              [(1, 2, 4, 4), (1, 4, 2, 2), (1, 4, 1, 1), (1, 4, 1, 1)],
                              call=lambda m, *xs: m(list(xs))), 40),
        GradCase("stage_merge", _module_case(lambda r: StageMerge(3, r), [(1, 3, 4, 4), (1, 3, 4, 4)]), 40),
        GradCase("local_stream",
                 _module_case(lambda r: LocalStream(ModelConfig(local_channels=(4, 4, 4, 4), se_reduction=2,
                                                                image_size=32), r),
                              [(1, 3, 32, 32)], call=lambda m, x: m(x).merged[2]), 20),
        GradCase("channel_attention", _module_case(lambda r: ChannelAttention(4, 2, r), [(2, 4, 3, 3)])),
        GradCase("spatial_attention", _module_case(lambda r: SpatialAttention(r), [(2, 3, 4, 4)]), 60),
        GradCase("correlation_fuse",
                 _module_case(lambda r: CorrelationFuse(3, 4, r), [(1, 3, 3, 3), (1, 3, 3, 3)],
                              call=lambda m, a, b: m(a, b).fused), 60),
        GradCase("correlation_map_spatial", _spatial_corr_case, 60),
        GradCase("cofuse_level",
                 _module_case(lambda r: CoFuseLevel(4, 4, 3, 2, r), [(1, 4, 4, 4), (1, 4, 2, 2)],
                              call=lambda m, a, b: m(a, b).fused), 40),
        GradCase("flow_field", _module_case(lambda r: _randomized(FlowField(3, r), r), [(1, 3, 4, 4)]), 60),
        GradCase("warp_body", lambda rng: (projected(warp_body),
                                           [_t(rng, 1, 3, 4, 4), _t(rng, 1, 2, 4, 4, lo=-1.3, hi=1.3)])),
        GradCase("edge_decoupler",
                 _module_case(lambda r: _randomized(EdgeDecoupler(3, 2, r), r), [(1, 3, 4, 4), (1, 2, 8, 8)],
                              call=lambda m, f, low: ops.concat_channels(
                                  [m(f, low).final, m(f, low).body, m(f, low).flow])), 40),
        GradCase("bce_loss", _loss_case(bce_loss)),
        GradCase("iou_loss", _loss_case(iou_loss)),
        GradCase("iou_loss_printed", _loss_case(lambda p, y: iou_loss(p, y, variant="printed"))),
        GradCase("edge_loss", _loss_case(edge_loss)),
        GradCase("total_loss", _total_loss_case),
    ]


def _spatial_corr_case(rng):
    # fc2's bias is constant over positions, so a spatial softmax cancels it
    # (true gradient 0); it is left out of the check.
    mod = CorrelationFuse(2, 2, rng, softmax_axis="spatial").astype(F64)
    x = _t(rng, 1, 4, 3, 3)
    return projected(lambda x, *_: mod.correlation(x)), [x, mod.fc1.weight, mod.fc1.bias, mod.fc2.weight]


def _randomized(mod, rng):
    """Give zero-initialised flow convs random weights so the warp path is exercised."""
    for _, p in mod.named_parameters():
        if not np.any(p.data):
            p.data = rng.uniform(-0.3, 0.3, size=p.shape).astype(p.dtype)
    return mod


TOY8 = ModelConfig(base_channels=4, local_channels=(4, 8, 8, 8), se_reduction=2, image_size=8,
                   stripe_widths=(1, 0, 0, 0))


def _model_case(rng):
    model = _randomized(build_model(TOY8, F64), rng)
    x = _t(rng, 1, 3, 8, 8, lo=0.0, hi=1.0)
    y = (rng.random((1, 1, 8, 8)) < 0.3).astype(F64)
    ye = derive_edge_gt(y[:, 0])[:, None].astype(F64)

    def fn(image, *params):
        out = model(image)
        bundle = PredictionBundle(ops.sigmoid(out.final_logits), ops.sigmoid(out.global_logits),
                                  ops.sigmoid(out.local_logits), ops.sigmoid(out.edge_logits))
        loss, _ = total_loss(bundle, y, ye)
        return loss

    return fn, [x] + model.parameters()


def model_cases() -> list[GradCase]:
    # 1x1 stages make some gradients vanish (~1e-8); FD noise on those is
    # meaningless per tensor, so the error is taken against the whole gradient.
    return [GradCase("toy_model_8x8", _model_case, max_entries=3, scale="global")]


CASES = {"ops": op_cases, "blocks": block_cases, "model": model_cases}


def run_scope(scope: str, seed: int = 0, eps: float = 1e-6,
              only: Optional[list[str]] = None) -> list[GradReport]:
    if scope not in CASES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; choose from {SCOPES}")
    reports = []
    for case in CASES[scope]():
        if only and case.name not in only:
            continue
        rng = np.random.default_rng(seed)
        fn, inputs = case.build(rng)
        reports.append(finite_diff_check(fn, inputs, eps=eps, max_entries=case.max_entries,
                                         seed=seed, name=case.name, scale=case.scale))
    return reports


def failures(reports: list[GradReport], threshold: float) -> list[GradReport]:
    return [r for r in reports if not r.max_rel_error < threshold]


def run(scopes=SCOPES, seed: int = 0) -> tuple[dict[str, list[GradReport]], list[tuple[str, GradReport]], float]:
    """Run several scopes; returns (reports by scope, threshold breaches, seconds)."""
    t0 = time.perf_counter()
    by_scope = {s: run_scope(s, seed) for s in scopes}
    bad = [(s, r) for s, reps in by_scope.items() for r in failures(reps, THRESHOLDS[s])]
    return by_scope, bad, time.perf_counter() - t0
