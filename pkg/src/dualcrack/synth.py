"""Seeded synthetic crack images: textured background plus a dark random-walk polyline."""

from __future__ import annotations

import zlib
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

MAX_POSITIVE_FRACTION = 0.25


def _sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(split.encode()), index]))


def _polyline(rng: np.random.Generator, size: int) -> np.ndarray:
    """Random walk with slowly drifting heading, starting near one border."""
    side = rng.integers(4)
    t = rng.uniform(0.15, 0.85) * (size - 1)
    start = {0: (t, 0.0), 1: (t, size - 1.0), 2: (0.0, t), 3: (size - 1.0, t)}[int(side)]
    heading = {0: np.pi / 2, 1: -np.pi / 2, 2: 0.0, 3: np.pi}[int(side)]
    heading += rng.uniform(-0.6, 0.6)
    step = size / rng.uniform(8, 14)
    pts = [np.array(start)]
    for _ in range(int(rng.integers(6, 16))):
        heading += rng.normal(0, 0.45)
        nxt = pts[-1] + step * np.array([np.cos(heading), np.sin(heading)])
        pts.append(nxt)
        if not (0 <= nxt[0] < size and 0 <= nxt[1] < size):
            break
    return np.array(pts)  # (row, col) pairs


def rasterize_polyline(points: np.ndarray, width: float, size: int) -> np.ndarray:
    """Pixels whose centre lies within ``width / 2`` of any segment."""
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    best = np.full((size, size), np.inf)
    for a, b in zip(points[:-1], points[1:]):
        d = b - a
        denom = float(d @ d) or 1.0
        t = np.clip(((rr - a[0]) * d[0] + (cc - a[1]) * d[1]) / denom, 0.0, 1.0)
        dist = np.hypot(rr - (a[0] + t * d[0]), cc - (a[1] + t * d[1]))
        best = np.minimum(best, dist)
    return best <= width / 2.0


def make_sample(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (uint8 RGB image [H,W,3], uint8 mask in {0,255})."""
    base = rng.uniform(0.45, 0.75)
    noise = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), sigma=rng.uniform(1.5, 4.0))
    noise /= np.abs(noise).max() + 1e-12
    grain = rng.normal(0, 0.02, (size, size))
    bg = np.clip(base + 0.08 * noise + grain, 0.0, 1.0)
    tint = rng.uniform(0.92, 1.08, size=3)
    while True:
        width = rng.uniform(1.0, 4.0)
        mask = rasterize_polyline(_polyline(rng, size), width, size)
        frac = mask.mean()
        if 0 < frac < MAX_POSITIVE_FRACTION:
            break
    darken = rng.uniform(0.3, 0.6)
    gray = np.where(mask, bg * darken, bg)
    rgb = np.clip(gray[..., None] * tint[None, None, :], 0.0, 1.0)
    return (rgb * 255).round().astype(np.uint8), mask.astype(np.uint8) * 255


def synth_cracks(out_dir: Path, seed: int, count: int, size: int = 64, split: str = "train") -> Path:
    """Write ``count`` image/mask PNG pairs under ``out_dir/<split>/{images,masks}``."""
    if size % 32:
        raise ValueError(f"size must be a multiple of 32, got {size}")
    root = Path(out_dir) / split
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i in range(count):
        img, mask = make_sample(_sample_rng(seed, split, i), size)
        stem = f"{split}_{i:05d}"
        Image.fromarray(img, "RGB").save(root / "images" / f"{stem}.png")
        Image.fromarray(mask, "L").save(root / "masks" / f"{stem}.png")
    return root
