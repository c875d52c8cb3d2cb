"""Central finite-difference oracle for the tape's analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradReport:
    name: str
    max_rel_error: float
    per_input: list[float]
    checked_entries: int


def relative_error(analytic: np.ndarray, numeric: np.ndarray, guard: float = 1e-8) -> float:
    """Max abs deviation scaled by the larger gradient magnitude (+guard)."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    return float(np.abs(analytic - numeric).max(initial=0.0) / (scale + guard))


def projected(fn: Callable[..., Tensor], seed: int = 0) -> Callable[..., Tensor]:
    """Turn a tensor-valued function into a scalar one via a fixed random projection."""
    cache: dict[tuple, np.ndarray] = {}

    def scalar_fn(*args):
        out = fn(*args)
        key = out.shape
        if key not in cache:
            cache[key] = np.random.default_rng(seed).uniform(-1, 1, size=key).astype(out.dtype)
        return (out * cache[key]).sum()

    return scalar_fn


def finite_diff_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
                      max_entries: Optional[int] = None, seed: int = 0,
                      name: str = "", scale: str = "per_input") -> GradReport:
    """Compare tape gradients of scalar ``fn(*inputs)`` with central differences.

    Every input with ``requires_grad`` is checked.  ``max_entries`` caps the
    number of perturbed coordinates per input (chosen with a seeded RNG).
    ``scale="per_input"`` normalises each input's error by that input's own
    gradient magnitude; ``scale="global"`` by the largest magnitude over all
    inputs, i.e. the error relative to the whole gradient vector.
    """
    if scale not in ("per_input", "global"):
        raise ValueError(f"scale must be per_input|global, got {scale!r}")
    targets = [t for t in inputs if t.requires_grad]
    for t in targets:
        t.grad = None
    with Tape() as tape:
        loss = fn(*inputs)
    if loss.data.size != 1:
        raise ValueError(f"finite_diff_check needs a scalar function, got shape {loss.shape}")
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    pairs = []
    total = 0
    for t in targets:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if max_entries is None or n <= max_entries else \
            np.sort(rng.choice(n, size=max_entries, replace=False))
        num = np.empty(len(idx), dtype=np.float64)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(*inputs).data)
            flat[i] = orig - eps
            fm = float(fn(*inputs).data)
            flat[i] = orig
            num[k] = (fp - fm) / (2 * eps)
        pairs.append((analytic.reshape(-1)[idx], num))
        total += len(idx)
    if scale == "global":
        top = max((max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0)) for a, n in pairs),
                  default=0.0)
        errors = [float(np.abs(a - n).max(initial=0.0) / (top + 1e-8)) for a, n in pairs]
    else:
        errors = [relative_error(a, n) for a, n in pairs]
    return GradReport(name, max(errors, default=0.0), errors, total)
