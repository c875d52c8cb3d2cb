"""Training losses, edge ground truth and pixel-level evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .autodiff import ops
from .autodiff.tensor import Tensor

PROB_EPS = 1e-7


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    theta: tuple[float, float, float, float] = (1.0, 0.5, 0.5, 1.0)
    omega: float = 1.0
    eps: float = PROB_EPS

    def __post_init__(self) -> None:
        if len(self.theta) != 4 or any(not math.isfinite(t) or t < 0 for t in self.theta):
            raise ValueError(f"theta must be four finite nonnegative weights, got {self.theta}")
        if not (math.isfinite(self.omega) and self.omega > 0):
            raise ValueError(f"omega must be positive, got {self.omega}")


@dataclass
class PredictionBundle:
    final_prob: Tensor
    global_prob: Tensor
    local_prob: Tensor
    edge_prob: Optional[Tensor] = None


def _target(y, like: Tensor) -> np.ndarray:
    arr = y.data if isinstance(y, Tensor) else np.asarray(y)
    return arr.astype(like.dtype, copy=False)


def clamp_prob(p: Tensor, eps: float = PROB_EPS) -> Tensor:
    return ops.clip(p, eps, 1.0 - eps)


def bce_loss(p: Tensor, y, eps: float = PROB_EPS) -> Tensor:
    """Mean pixel binary cross entropy on clamped probabilities."""
    yt = _target(y, p)
    pc = clamp_prob(p, eps)
    ll = ops.log(pc) * yt + ops.log(1.0 - pc) * (1.0 - yt)
    return -ops.mean(ll)


def iou_loss(p: Tensor, y, eps: float = PROB_EPS, variant: str = "soft") -> Tensor:
    """Soft IoU loss ``1 - I / (sum y + sum p - I + eps)`` with I = sum(y*p).

    Empty target and empty prediction give 0.  ``variant='printed'`` returns the
    ratio ``I / (sum y + sum p)`` unchanged, for comparison only.
    """
    yt = _target(y, p)
    inter = ops.sum(p * yt)
    total = ops.sum(p) + float(yt.sum())
    if variant == "printed":
        return inter / (total + eps)
    if float(yt.sum()) == 0.0 and float(p.data.sum()) == 0.0:
        return ops.mul(ops.sum(p), 0.0)
    return 1.0 - inter / (total - inter + eps)


def structural_loss(p: Tensor, y, omega: float = 1.0, eps: float = PROB_EPS,
                    iou_variant: str = "soft") -> Tensor:
    return (bce_loss(p, y, eps) + iou_loss(p, y, eps, iou_variant)) * omega


def edge_loss(p: Tensor, y_edge, eps: float = PROB_EPS) -> Tensor:
    """Class-balanced BCE: each class term is weighted by the other class's frequency."""
    yt = _target(y_edge, p)
    n = yt.size
    n_pos = float(yt.sum())
    w_pos = (n - n_pos) / n
    w_neg = n_pos / n
    pc = clamp_prob(p, eps)
    ll = ops.log(pc) * (yt * w_pos) + ops.log(1.0 - pc) * ((1.0 - yt) * w_neg)
    return -ops.mean(ll)


def total_loss(bundle: PredictionBundle, y, y_edge, weights: LossWeights = LossWeights(),
               edge_mode: str = "weighted", iou_variant: str = "soft") -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of final, global, local and edge terms.

    Returns the scalar loss and the per-component values for logging.  A
    non-finite component raises :class:`NonFiniteLoss`.
    """
    eps = weights.eps
    parts = {
        "L_final": structural_loss(bundle.final_prob, y, weights.omega, eps, iou_variant),
        "L_global": structural_loss(bundle.global_prob, y, 1.0, eps, iou_variant),
        "L_local": structural_loss(bundle.local_prob, y, 1.0, eps, iou_variant),
    }
    if bundle.edge_prob is not None:
        parts["L_edge"] = (edge_loss(bundle.edge_prob, y_edge, eps) if edge_mode == "weighted"
                           else bce_loss(bundle.edge_prob, y_edge, eps))
    values = {k: float(v.data) for k, v in parts.items()}
    values.setdefault("L_edge", 0.0)
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise NonFiniteLoss(f"non-finite loss components: {', '.join(f'{k}={values[k]}' for k in bad)}")
    keys = ("L_final", "L_global", "L_local", "L_edge")
    acc = None
    for key, th in zip(keys, weights.theta):
        if key not in parts or th == 0:
            continue
        term = parts[key] * th
        acc = term if acc is None else acc + term
    if acc is None:
        acc = ops.mul(parts["L_final"], 0.0)
    values["L_all"] = float(acc.data)
    return acc, values


_CROSS = np.ones((3, 3), dtype=bool)


def derive_edge_gt(mask: np.ndarray) -> np.ndarray:
    """Boundary band of a binary mask: dilate(3x3) XOR erode(3x3), per 2-D slice."""
    m = np.asarray(mask) > 0
    if m.ndim > 2:
        return np.stack([derive_edge_gt(s) for s in m]).astype(np.uint8)
    dil = ndimage.binary_dilation(m, structure=_CROSS)
    ero = ndimage.binary_erosion(m, structure=_CROSS, border_value=0)
    return (dil ^ ero).astype(np.uint8)


@dataclass
class PixelCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def update(self, pred: np.ndarray, y: np.ndarray) -> "PixelCounts":
        pred = np.asarray(pred).astype(bool)
        y = np.asarray(y).astype(bool)
        if pred.shape != y.shape:
            raise ValueError(f"prediction {pred.shape} and target {y.shape} differ")
        self.tp += int(np.count_nonzero(pred & y))
        self.fp += int(np.count_nonzero(pred & ~y))
        self.fn += int(np.count_nonzero(~pred & y))
        self.tn += int(np.count_nonzero(~pred & ~y))
        return self

    def metrics(self) -> dict[str, float]:
        tp, fp, fn = self.tp, self.fp, self.fn
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        # F1 from counts keeps F1 = 2 IoU / (1 + IoU) exact
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        iou = tp / (tp + fp + fn) if tp else 0.0
        return {"precision": precision, "recall": recall, "f1": f1, "iou": iou}


def f1_iou_metrics(pred_mask: np.ndarray, y: np.ndarray) -> dict[str, float]:
    return PixelCounts().update(pred_mask, y).metrics()
