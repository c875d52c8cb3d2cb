"""Figures written next to the CSV outputs (training curves, per-image metrics, ablations)."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curves(log_rows: Sequence[dict], path: Path) -> Path:
    """One line per loss component against step, log-scaled."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.4))
        steps = np.array([float(r["step"]) for r in log_rows])
        for key in ("L_all", "L_final", "L_global", "L_local", "L_edge"):
            vals = np.array([float(r[key]) for r in log_rows])
            if np.any(vals > 0):
                ax.plot(steps, vals, label=key, lw=1.4 if key == "L_all" else 0.9)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title("Training loss components")
        ax.legend(ncol=3, fontsize=8)
        return _save(fig, path)


def plot_image_metrics(metric_rows: Sequence[dict], path: Path) -> Path:
    """Per-image F1 and IoU bars; the pooled (micro) values drawn as lines."""
    from .train import SUMMARY_STEM

    rows = [r for r in metric_rows if r["stem"] != SUMMARY_STEM]
    summary = next((r for r in metric_rows if r["stem"] == SUMMARY_STEM), None)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.18 * len(rows) + 2), 3.2))
        x = np.arange(len(rows))
        ax.bar(x - 0.2, [float(r["f1"]) for r in rows], 0.4, label="F1")
        ax.bar(x + 0.2, [float(r["iou"]) for r in rows], 0.4, label="IoU")
        if summary is not None:
            ax.axhline(float(summary["f1"]), color="C0", ls="--", lw=0.8, label="pooled F1")
            ax.axhline(float(summary["iou"]), color="C1", ls="--", lw=0.8, label="pooled IoU")
        ax.set_xticks(x)
        ax.set_xticklabels([r["stem"] for r in rows], rotation=90, fontsize=6)
        ax.set_ylim(0, 1)
        ax.set_ylabel("score")
        ax.set_title("Per-image metrics")
        ax.legend(ncol=4, fontsize=7, loc="lower right")
        return _save(fig, path)


def plot_ablation(results, table: str, path: Path) -> Path:
    """Grouped bars of F1 and IoU per configuration for one ablation table."""
    from .ablation import TABLES

    labels = [label for label, _ in TABLES[table]]
    rows = [r for r in results if r.table == table]
    datasets = list(dict.fromkeys(r.dataset for r in rows))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8.5, 3.4), sharey=True)
        width = 0.8 / max(len(datasets), 1)
        x = np.arange(len(labels))
        for ax, metric in zip(axes, ("f1", "iou")):
            for k, name in enumerate(datasets):
                vals = {r.row: getattr(r, metric) for r in rows if r.dataset == name}
                ax.bar(x + (k - (len(datasets) - 1) / 2) * width,
                       [vals.get(lbl, np.nan) for lbl in labels], width, label=name)
            ax.set_xticks(x)
            ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
            ax.set_title(metric.upper())
            ax.set_ylim(0, 1)
        axes[0].set_ylabel("score")
        axes[1].legend(fontsize=7)
        return _save(fig, path)


def plot_overlay(image_hwc: np.ndarray, mask: np.ndarray, overlay_hwc: np.ndarray, path: Path) -> Path:
    """Input, predicted mask and overlay side by side."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.7))
        for ax, img, title in zip(axes, (image_hwc, mask, overlay_hwc), ("input", "mask", "overlay")):
            ax.imshow(img, cmap="gray" if img.ndim == 2 else None, interpolation="nearest")
            ax.set_title(title)
            ax.axis("off")
        return _save(fig, path)
