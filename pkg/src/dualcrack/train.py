"""Training loop, evaluation and single-image inference."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import checkpoint as ckpt
from .autodiff import ops
from .autodiff.tensor import Tape, Tensor
from .config import ModelConfig, TrainConfig, _canonical
from .data import CrackDataset, SampleBatch, decode_image, pad_to_multiple
from .decoupling import binarize
from .model import DualFlowNet, build_model
from .objective import LossWeights, NonFiniteLoss, PixelCounts, PredictionBundle, total_loss
from .optim import Adam

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "L_all", "L_final", "L_global", "L_local", "L_edge")
METRIC_COLUMNS = ("stem", "tp", "fp", "fn", "precision", "recall", "f1", "iou")
SUMMARY_STEM = "__summary__"


class TrainingDiverged(RuntimeError):
    pass


def _fmt(v) -> str:
    return f"{v:.8g}" if isinstance(v, float) else str(v)


def dtype_for(cfg: TrainConfig):
    return np.float64 if cfg.precision == "double" else np.float32


def compute_loss(model: DualFlowNet, batch: SampleBatch, cfg: TrainConfig):
    dt = model.dtype
    out = model(Tensor(batch.images.astype(dt)))
    bundle = PredictionBundle(
        final_prob=ops.sigmoid(out.final_logits),
        global_prob=ops.sigmoid(out.global_logits),
        local_prob=ops.sigmoid(out.local_logits),
        edge_prob=ops.sigmoid(out.edge_logits) if out.edge_logits is not None else None,
    )
    weights = LossWeights(tuple(cfg.theta), cfg.omega)
    loss, parts = total_loss(bundle, batch.masks, batch.edges, weights, cfg.edge_loss, cfg.iou_variant)
    return loss, parts, out


def _augment(batch: SampleBatch, rng: np.random.Generator) -> SampleBatch:
    images, masks, edges = batch.images.copy(), batch.masks.copy(), batch.edges.copy()
    for i in range(len(batch)):
        if rng.random() < 0.5:
            images[i], masks[i], edges[i] = images[i][..., ::-1], masks[i][..., ::-1], edges[i][..., ::-1]
        if rng.random() < 0.5:
            images[i], masks[i], edges[i] = images[i][..., ::-1, :], masks[i][..., ::-1, :], edges[i][..., ::-1, :]
    return SampleBatch(images, masks, edges, batch.stems, batch.orig_hw)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)


def make_checkpoint(model: DualFlowNet, opt: Adam, step: int, rng: np.random.Generator) -> ckpt.Checkpoint:
    names = [n for n, _ in model.named_parameters()]
    return ckpt.Checkpoint(
        config_digest=model.cfg.digest(),
        params={n: p.data for n, p in model.named_parameters()},
        step=step,
        model_config=_canonical(model.cfg),
        adam_t=opt.t,
        adam_m=dict(zip(names, opt.m)),
        adam_v=dict(zip(names, opt.v)),
        rng_state=rng.bit_generator.state,
    )


def restore(model: DualFlowNet, opt: Optional[Adam], ck: ckpt.Checkpoint) -> None:
    model.load_state_dict(ck.params)
    if opt is not None and ck.adam_m is not None:
        names = [n for n, _ in model.named_parameters()]
        opt.t = ck.adam_t
        opt.m = [ck.adam_m[n].astype(model.dtype) for n in names]
        opt.v = [ck.adam_v[n].astype(model.dtype) for n in names]


@dataclass
class TrainResult:
    model: DualFlowNet
    history: list[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    log_path: Optional[Path] = None
    step: int = 0


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: CrackDataset,
          out_dir: Optional[Path] = None, resume: Optional[Path] = None,
          model: Optional[DualFlowNet] = None) -> TrainResult:
    """Adam training with seeded per-epoch shuffling.

    Writes ``train_log.csv`` and ``epoch_XXX.dffm`` / ``final.dffm`` checkpoints
    under ``out_dir`` when given.  ``resume`` continues from a checkpoint's step.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = model or build_model(model_cfg, dtype_for(train_cfg))
    opt = Adam(model.parameters(), train_cfg.lr, (train_cfg.beta1, train_cfg.beta2), train_cfg.adam_eps)
    rng = np.random.default_rng(train_cfg.seed)
    step = 0
    if resume is not None:
        ck = ckpt.load(resume, model_cfg.digest())
        restore(model, opt, ck)
        step = ck.step
        if ck.rng_state is not None:
            rng.bit_generator.state = ck.rng_state
    out_dir = Path(out_dir) if out_dir is not None else None
    log_rows: list[dict] = []
    log_file = None
    writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.csv", "w", newline="")
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)

    n = len(dataset)
    bs = train_cfg.batch_size
    steps_per_epoch = math.ceil(n / bs)
    total_steps = steps_per_epoch * train_cfg.epochs
    if train_cfg.max_steps:
        total_steps = min(total_steps, train_cfg.max_steps) if train_cfg.epochs else train_cfg.max_steps
    last_ckpt: Optional[Path] = None

    def save_to(name: str) -> Optional[Path]:
        if out_dir is None:
            return None
        return ckpt.save(make_checkpoint(model, opt, step, rng), out_dir / name)

    try:
        while step < total_steps:
            epoch, pos = divmod(step, steps_per_epoch)
            order = epoch_order(train_cfg.seed, epoch, n)
            idx = order[pos * bs:(pos + 1) * bs]
            batch = dataset.batches(bs, idx).__next__()
            if train_cfg.augment:
                batch = _augment(batch, rng)
            opt.zero_grad()
            with Tape() as tape:
                try:
                    loss, parts, _ = compute_loss(model, batch, train_cfg)
                except NonFiniteLoss as exc:
                    raise TrainingDiverged(
                        f"step {step + 1}: {exc}; last good checkpoint: {last_ckpt}") from exc
            tape.backward(loss)
            opt.step()
            step += 1
            row = {"step": step, **{k: parts[k] for k in LOG_COLUMNS[1:]}}
            log_rows.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[k]) for k in LOG_COLUMNS])
            if train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
                last_ckpt = save_to(f"step_{step:06d}.dffm") or last_ckpt
            if step % steps_per_epoch == 0:
                last_ckpt = save_to(f"epoch_{step // steps_per_epoch:03d}.dffm") or last_ckpt
        last_ckpt = save_to("final.dffm") or last_ckpt
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(model, log_rows, last_ckpt,
                       out_dir / "train_log.csv" if out_dir is not None else None, step)


def load_model(path: Path, model_cfg: ModelConfig, dtype=np.float32) -> DualFlowNet:
    """Build the model for ``model_cfg`` and load weights; refuses a digest mismatch."""
    ck = ckpt.load(path, model_cfg.digest())
    model = build_model(model_cfg, dtype)
    model.load_state_dict(ck.params)
    return model


def predict_masks(model: DualFlowNet, dataset: CrackDataset, batch_size: int = 2,
                  threshold: float = 0.5) -> dict[str, np.ndarray]:
    """Binary masks per stem, cropped back to the original extent."""
    preds = {}
    for batch in dataset.batches(batch_size):
        prob = model.predict_proba(batch.images)
        for i, stem in enumerate(batch.stems):
            h, w = batch.orig_hw[i]
            preds[stem] = binarize(prob[i, 0, :h, :w], threshold)
    return preds


@dataclass
class EvalResult:
    rows: list[dict]
    summary: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in self.rows + [self.summary]:
            w.writerow([_fmt(row[k]) for k in METRIC_COLUMNS])
        return buf.getvalue()


def evaluate_predictions(preds: dict[str, np.ndarray], dataset: CrackDataset) -> EvalResult:
    total = PixelCounts()
    rows = []
    for s in dataset:
        h, w = s.orig_hw
        gt = s.mask[0, :h, :w]
        c = PixelCounts().update(preds[s.stem], gt)
        total.update(preds[s.stem], gt)
        rows.append({"stem": s.stem, "tp": c.tp, "fp": c.fp, "fn": c.fn, **c.metrics()})
    summary = {"stem": SUMMARY_STEM, "tp": total.tp, "fp": total.fp, "fn": total.fn, **total.metrics()}
    return EvalResult(rows, summary)


def evaluate(model: DualFlowNet, dataset: CrackDataset, batch_size: int = 2,
             threshold: float = 0.5, out_csv: Optional[Path] = None) -> EvalResult:
    """Micro-averaged precision/recall/F1/IoU, one row per image plus a summary row."""
    res = evaluate_predictions(predict_masks(model, dataset, batch_size, threshold), dataset)
    if out_csv is not None:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        Path(out_csv).write_text(res.to_csv())
    return res


def overlay(image_hwc: np.ndarray, mask: np.ndarray, color=(255, 0, 0), alpha: float = 0.6) -> np.ndarray:
    base = image_hwc.astype(np.float32)
    tint = np.asarray(color, dtype=np.float32)
    sel = mask.astype(bool)
    base[sel] = (1 - alpha) * base[sel] + alpha * tint
    return base.round().clip(0, 255).astype(np.uint8)


def infer(model: DualFlowNet, image_path: Path, out_dir: Path, threshold: float = 0.5) -> tuple[Path, Path]:
    """Write ``<stem>_mask.png`` (0/255) and ``<stem>_overlay.png`` for one image."""
    img = decode_image(Path(image_path))
    h, w = img.shape[1:]
    padded = pad_to_multiple(img, 32)
    prob = model.predict_proba(padded[None])
    mask = binarize(prob[0, 0, :h, :w], threshold)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(image_path).stem
    mask_path = out_dir / f"{stem}_mask.png"
    over_path = out_dir / f"{stem}_overlay.png"
    Image.fromarray(mask * 255, "L").save(mask_path)
    rgb = (img.transpose(1, 2, 0) * 255).round().astype(np.uint8)
    Image.fromarray(overlay(rgb, mask), "RGB").save(over_path)
    return mask_path, over_path
