"""Ablation runner for the fusion (CoFuse) and edge-head (DecM) studies."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

from .config import ConfigError, ModelConfig, TrainConfig
from .data import CrackDataset
from .model import build_model
from .train import evaluate, train

log = logging.getLogger(__name__)

MODEL_FLAGS = ("gf_filter", "lf_filter", "corr_fuse", "decm")
TRAIN_FLAGS = ("edge_loss", "edge_supervision")
VALID_FLAGS = MODEL_FLAGS + TRAIN_FLAGS

_DSM = {"gf_filter": False, "lf_filter": False, "corr_fuse": False, "decm": False}
_DSFM = {"gf_filter": True, "lf_filter": True, "corr_fuse": True, "decm": False}

# (table, row label, flag overrides)
FUSION_ROWS: tuple[tuple[str, dict], ...] = (
    ("DSM", dict(_DSM)),
    ("DSM + gf_filter", {**_DSM, "gf_filter": True}),
    ("DSM + lf_filter", {**_DSM, "lf_filter": True}),
    ("DSM + corr_fuse", {**_DSM, "corr_fuse": True}),
    ("DSM + filter", {**_DSM, "gf_filter": True, "lf_filter": True}),
    ("DSM + CoFuse", dict(_DSFM)),
)
EDGE_ROWS: tuple[tuple[str, dict], ...] = (
    ("DSFM", dict(_DSFM)),
    ("DSFM + DecM", {**_DSFM, "decm": True, "edge_supervision": False}),
    ("DSFM + DecM + BCELoss", {**_DSFM, "decm": True, "edge_loss": "bce"}),
    ("DSFM + DecM + EdgeLoss", {**_DSFM, "decm": True, "edge_loss": "weighted"}),
)
TABLES = {"fusion": FUSION_ROWS, "edge": EDGE_ROWS}


def apply_flags(model_cfg: ModelConfig, train_cfg: TrainConfig,
                flags: dict) -> tuple[ModelConfig, TrainConfig]:
    """Return configs with ablation ``flags`` applied; unknown names are rejected."""
    unknown = sorted(set(flags) - set(VALID_FLAGS))
    if unknown:
        raise ConfigError(f"unknown ablation flag(s) {unknown}; valid flags: {list(VALID_FLAGS)}")
    model_cfg = model_cfg.replace(**{k: v for k, v in flags.items() if k in MODEL_FLAGS})
    tkw = {}
    if "edge_loss" in flags:
        tkw["edge_loss"] = flags["edge_loss"]
    if flags.get("edge_supervision") is False:
        tkw["theta"] = tuple(train_cfg.theta[:3]) + (0.0,)
    return model_cfg, train_cfg.replace(**tkw)


def parameter_count(model_cfg: ModelConfig) -> int:
    return build_model(model_cfg).num_parameters()


@dataclass
class AblationResult:
    table: str
    row: str
    dataset: str
    params: int
    f1: float
    iou: float


RESULT_COLUMNS = ("table", "row", "dataset", "params", "f1", "iou")


def run_ablation(datasets: Sequence[tuple[str, CrackDataset, CrackDataset]],
                 model_cfg: ModelConfig, train_cfg: TrainConfig,
                 tables: Sequence[str] = ("fusion", "edge")) -> list[AblationResult]:
    """Train and evaluate every row of ``tables`` on every (name, train, test) triple,
    all under the same seed and step budget."""
    results = []
    for table in tables:
        for label, flags in TABLES[table]:
            mcfg, tcfg = apply_flags(model_cfg, train_cfg, flags)
            for name, train_ds, test_ds in datasets:
                log.info("ablation %s / %s on %s", table, label, name)
                res = train(mcfg, tcfg, train_ds)
                metrics = evaluate(res.model, test_ds).summary
                results.append(AblationResult(table, label, name, res.model.num_parameters(),
                                              metrics["f1"], metrics["iou"]))
    return results


def single_step(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: CrackDataset,
                flags: dict) -> tuple[int, dict]:
    """Build one row's model and run a single optimisation step; returns (params, losses)."""
    mcfg, tcfg = apply_flags(model_cfg, train_cfg, flags)
    res = train(mcfg, tcfg.replace(max_steps=1, epochs=1), dataset)
    return res.model.num_parameters(), res.history[-1]


def results_csv(results: Sequence[AblationResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in results:
        w.writerow([r.table, r.row, r.dataset, r.params, f"{r.f1:.6f}", f"{r.iou:.6f}"])
    return buf.getvalue()


def format_table(results: Sequence[AblationResult], table: str, metric: str,
                 datasets: Optional[Sequence[str]] = None) -> str:
    """Wide CSV: one row per configuration, one column per dataset, plus the average."""
    rows = [r for r in results if r.table == table]
    names = list(datasets) if datasets else list(dict.fromkeys(r.dataset for r in rows))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Model"] + names + [f"Average of {metric.upper()}"])
    for label, _ in TABLES[table]:
        vals = {r.dataset: getattr(r, metric) for r in rows if r.row == label}
        cells = [vals.get(n) for n in names]
        present = [v for v in cells if v is not None]
        avg = sum(present) / len(present) if present else None
        w.writerow([label] + ["" if v is None else f"{100 * v:.1f}%" for v in cells + [avg]])
    return buf.getvalue()
