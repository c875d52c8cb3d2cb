"""Command line entry point: ``dualcrack {train,eval,infer,synth,ablate,gradcheck}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import ablation, report
from . import checkpoint as ckpt
from .config import ConfigError, ModelConfig, TrainConfig, format_config, load_config
from .data import LAYOUTS, DatasetError, DatasetSpec, decode_image, load_dataset
from .synth import synth_cracks
from .train import evaluate, infer, load_model, overlay, train

log = logging.getLogger("dualcrack")


def _add_common(p: argparse.ArgumentParser, dataset: bool = True) -> None:
    p.add_argument("--config", type=Path, help="flat 'key = value' config file")
    p.add_argument("--seed", type=int, help="overrides the model and training seeds")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    if dataset:
        p.add_argument("--dataset", choices=sorted(LAYOUTS), default="synthetic")
        p.add_argument("--root", type=Path, required=True, help="dataset root directory")
        p.add_argument("--resize", type=int, default=0, help="square resize before padding (0 = native)")
    p.add_argument("--no-gf-filter", action="store_true", help="skip channel attention on global features")
    p.add_argument("--no-lf-filter", action="store_true", help="skip spatial attention on local features")
    p.add_argument("--no-corr-fuse", action="store_true", help="plain 1x1 conv fusion instead of the correlation map")
    p.add_argument("--no-decm", action="store_true", help="drop the body/edge head")
    p.add_argument("--edge-loss", choices=("weighted", "bce"), help="edge-head loss")


def _configs(args) -> tuple[ModelConfig, TrainConfig]:
    model_cfg, train_cfg = load_config(args.config)
    mkw = {}
    for flag, key in (("no_gf_filter", "gf_filter"), ("no_lf_filter", "lf_filter"),
                      ("no_corr_fuse", "corr_fuse"), ("no_decm", "decm")):
        if getattr(args, flag, False):
            mkw[key] = False
    tkw = {}
    if getattr(args, "edge_loss", None):
        tkw["edge_loss"] = args.edge_loss
    if args.seed is not None:
        mkw["seed"] = tkw["seed"] = args.seed
    for key in ("epochs", "max_steps", "batch_size", "lr"):
        val = getattr(args, key, None)
        if val is not None:
            tkw[key] = val
    return model_cfg.replace(**mkw), train_cfg.replace(**tkw)


def _dataset(args, split: str):
    return load_dataset(DatasetSpec(args.dataset, args.root, split, resize=args.resize))


def _eval_split(name: str) -> str:
    splits = LAYOUTS[name]
    return "test" if "test" in splits else next(iter(splits))


def cmd_synth(args) -> int:
    for split, count in (("train", args.count), ("test", args.test_count)):
        if count:
            root = synth_cracks(args.out, args.seed if args.seed is not None else 0, count, args.size, split)
            print(f"wrote {count} samples to {root}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = _configs(args)
    ds = _dataset(args, args.split)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.txt").write_text(format_config(model_cfg, train_cfg))
    res = train(model_cfg, train_cfg, ds, args.out, resume=args.checkpoint)
    fig = report.plot_loss_curves(report.read_csv(res.log_path), args.out / "loss_curves.png")
    print(f"steps={res.step} checkpoint={res.checkpoint} log={res.log_path} figure={fig}")
    return 0


def _load(args, model_cfg: ModelConfig):
    try:
        return load_model(args.checkpoint, model_cfg)
    except ckpt.DigestMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return None


def cmd_eval(args) -> int:
    model_cfg, _ = _configs(args)
    model = _load(args, model_cfg)
    if model is None:
        return 2
    ds = _dataset(args, args.split or _eval_split(args.dataset))
    out_csv = args.out / "metrics.csv"
    res = evaluate(model, ds, threshold=args.threshold, out_csv=out_csv)
    fig = report.plot_image_metrics(report.read_csv(out_csv), args.out / "metrics.png")
    s = res.summary
    print(f"precision={s['precision']:.4f} recall={s['recall']:.4f} f1={s['f1']:.4f} "
          f"iou={s['iou']:.4f} csv={out_csv} figure={fig}")
    return 0


def cmd_infer(args) -> int:
    model_cfg, _ = _configs(args)
    model = _load(args, model_cfg)
    if model is None:
        return 2
    mask_path, over_path = infer(model, args.image, args.out, args.threshold)
    from PIL import Image

    rgb = (decode_image(args.image).transpose(1, 2, 0) * 255).round().astype(np.uint8)
    mask = np.asarray(Image.open(mask_path)) > 0
    fig = report.plot_overlay(rgb, mask, overlay(rgb, mask), args.out / f"{args.image.stem}_panel.png")
    print(f"mask={mask_path} overlay={over_path} figure={fig}")
    return 0


def cmd_ablate(args) -> int:
    model_cfg, train_cfg = _configs(args)
    tables = [t.strip() for t in args.tables.split(",") if t.strip()]
    unknown = [t for t in tables if t not in ablation.TABLES]
    if unknown:
        raise ConfigError(f"unknown table(s) {unknown}; choose from {sorted(ablation.TABLES)}")
    train_ds = _dataset(args, args.split)
    test_ds = _dataset(args, _eval_split(args.dataset))
    args.out.mkdir(parents=True, exist_ok=True)
    if args.single_step:
        rows = ["table,row,params,L_all"]
        for table in tables:
            for label, flags in ablation.TABLES[table]:
                n, losses = ablation.single_step(model_cfg, train_cfg, train_ds, flags)
                rows.append(f"{table},{label},{n},{losses['L_all']:.6g}")
        (args.out / "ablation_single_step.csv").write_text("\n".join(rows) + "\n")
        print("\n".join(rows))
        return 0
    results = ablation.run_ablation([(args.dataset, train_ds, test_ds)], model_cfg, train_cfg, tables)
    (args.out / "ablation_results.csv").write_text(ablation.results_csv(results))
    for table in tables:
        for metric in ("f1", "iou"):
            text = ablation.format_table(results, table, metric)
            (args.out / f"{table}_{metric}.csv").write_text(text)
            print(text)
        report.plot_ablation(results, table, args.out / f"{table}.png")
    return 0


def cmd_gradcheck(args) -> int:
    from . import gradcheck_suite as gs

    scopes = gs.SCOPES if args.scope == "all" else (args.scope,)
    by_scope, bad, seconds = gs.run(scopes, seed=args.seed or 0)
    for scope, reports in by_scope.items():
        for r in reports:
            status = "ok" if r.max_rel_error < gs.THRESHOLDS[scope] else "FAIL"
            print(f"{scope:6s} {r.name:28s} {r.max_rel_error:.3e} {status}")
    print(f"{sum(len(v) for v in by_scope.values())} checks in {seconds:.1f}s")
    for scope, r in bad:
        print(f"threshold breach: {scope}/{r.name} max relative error {r.max_rel_error:.3e} "
              f"> {gs.THRESHOLDS[scope]:.0e}", file=sys.stderr)
    return 1 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualcrack", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded synthetic crack dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=200, help="training samples")
    p.add_argument("--test-count", type=int, default=50, help="test samples")
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and write checkpoints plus the loss log")
    _add_common(p)
    p.add_argument("--split", default="train")
    p.add_argument("--checkpoint", type=Path, help="resume from this checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics CSV and figure for a checkpoint on a split")
    _add_common(p)
    p.add_argument("--split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="mask and overlay PNGs for one image")
    _add_common(p, dataset=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="run the fusion and edge-head ablation tables")
    _add_common(p)
    p.add_argument("--split", default="train")
    p.add_argument("--tables", default="fusion,edge")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--single-step", action="store_true",
                   help="build each row and run one step only (parameter counts and losses)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--scope", choices=("ops", "blocks", "model", "all"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, ckpt.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
