"""Acceptance criteria 1-8.  Each test prints one ``ACCEPTANCE n: PASS|FAIL`` line
(also repeated in the terminal summary) and then asserts."""

import math
import time

import numpy as np
import pytest

from dualcrack import ablation
from dualcrack import gradcheck_suite as gs
from dualcrack.autodiff import Tensor, ops
from dualcrack.cofuse import ChannelAttention
from dualcrack.config import ModelConfig, TrainConfig
from dualcrack.data import DatasetSpec, load_dataset
from dualcrack.model import build_model
from dualcrack.objective import PixelCounts, bce_loss, edge_loss, iou_loss
from dualcrack.synth import synth_cracks
from dualcrack.train import evaluate, train

from test_objective import bce_oracle, edge_oracle, iou_oracle

pytestmark = pytest.mark.slow


def _f1_identity(summary_rows):
    return all(abs(r["f1"] - 2 * r["iou"] / (1 + r["iou"])) <= 1e-12 for r in summary_rows)


def test_criterion_1_gradient_suite(acceptance):
    by_scope, bad, seconds = gs.run(gs.SCOPES)
    worst = {s: max(r.max_rel_error for r in reps) for s, reps in by_scope.items()}
    n = sum(len(v) for v in by_scope.values())
    ok = not bad and seconds < 120
    detail = (f"{n} checks, worst ops {worst['ops']:.1e} < 1e-5, blocks {worst['blocks']:.1e} < 1e-5, "
              f"8x8 model {worst['model']:.1e} < 1e-3, {seconds:.1f}s < 120s")
    assert acceptance(1, ok, detail), [(s, r.name, r.max_rel_error) for s, r in bad]


def test_criterion_2_shape_laws(acceptance):
    cfg = ModelConfig()
    assert cfg.base_channels == 16
    model = build_model(cfg)
    out = model(Tensor(np.random.default_rng(0).random((2, 3, 64, 64)).astype(np.float32)))
    checks = {}
    c = cfg.base_channels
    got = [tuple(s.shape[1:]) for s in out.global_feats.stages]
    want = [(2 ** i * c, 64 // 2 ** (i + 2), 64 // 2 ** (i + 2)) for i in range(4)]
    checks["global stages"] = got == want == [(16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 2, 2)]
    checks["X_g width"] = out.global_feats.fused.shape == (2, 4 * cfg.c_f, 16, 16)
    down = [t.shape for t in out.local_feats.down]
    halving = all(down[i + 1][2] * 2 == down[i][2] and down[i + 1][1] == 2 * down[i][1] for i in range(3))
    checks["local chain"] = (halving and down[0][2] == 32
                             and all(u.shape == d for u, d in zip(out.local_feats.up, down)))
    heads = [out.final_logits, out.global_logits, out.local_logits, out.edge_logits, out.body_logits]
    checks["heads"] = all(h.shape == (2, 1, 64, 64) for h in heads)
    ok = all(checks.values())
    assert acceptance(2, ok, ", ".join(f"{k} {'ok' if v else 'BAD'}" for k, v in checks.items())), checks


def test_criterion_3_exactness(acceptance):
    rng = np.random.default_rng(0)
    checks = {}
    x = rng.normal(size=(2, 4, 9, 7)).astype(np.float32)
    checks["grid_sample identity"] = np.array_equal(
        ops.grid_sample(Tensor(x), Tensor(np.zeros((2, 2, 9, 7), np.float32))).data, x)

    model = build_model(ModelConfig())
    image = Tensor(rng.random((1, 3, 64, 64)).astype(np.float32))
    out = model(image)
    dec = out.decoupled
    checks["final = edge + body"] = np.array_equal(dec.final.data, dec.edge.data + dec.body.data)
    corr_err = max(float(np.abs(lv.corr_map.data.sum(axis=1) - 1).max()) for lv in out.levels)
    checks["corr map sums"] = corr_err <= 1e-6

    block = model.global_stream.stages[0].blocks[0]
    tokens = block.norm1(model.global_stream.embed(image).transpose(0, 2, 3, 1))
    dense = block.attn.attention_matrix(tokens)
    checks["attention rows"] = float(np.abs(dense.sum(-1) - 1).max()) <= 1e-6
    _, h, w, _ = tokens.shape
    sh, sw = block.attn.stripes(h, w)
    rows, cols = np.divmod(np.arange(h * w), w)
    same_row = (rows[:, None] // sh) == (rows[None, :] // sh)
    same_col = (cols[:, None] // sw) == (cols[None, :] // sw)
    nh = block.attn.heads // 2
    checks["cross-window mask"] = bool(
        np.all(dense[:, :nh][:, :, ~same_row] == 0) and np.all(dense[:, nh:][:, :, ~same_col] == 0)
        and np.all(dense[:, :nh][:, :, same_row] > 0) and np.all(dense[:, nh:][:, :, same_col] > 0))

    feat = rng.normal(size=(2, 6, 5, 4))
    se = ChannelAttention(6, 2, rng)
    got = se.squeeze(Tensor(feat)).data.reshape(2, 6)
    ref = np.zeros((2, 6))
    for b in range(2):
        for ch in range(6):
            total = 0.0
            for i in range(5):
                for j in range(4):
                    total += feat[b, ch, i, j]
            ref[b, ch] = total / 20
    checks["SE squeeze"] = float(np.abs(got - ref).max()) <= 1e-6
    ok = all(checks.values())
    assert acceptance(3, ok, ", ".join(f"{k} {'ok' if v else 'BAD'}" for k, v in checks.items())), checks


def test_criterion_4_loss_oracles(acceptance, synth_root):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0.01, 0.99, (4, 4))
        y = (rng.random((4, 4)) < 0.4).astype(np.float64)
        pt = Tensor(p)
        for fn, oracle in ((bce_loss, bce_oracle), (iou_loss, iou_oracle), (edge_loss, edge_oracle)):
            worst = max(worst, abs(float(fn(pt, y).data) - oracle(p, y)))
    ln2 = abs(float(bce_loss(Tensor(np.full((4, 4), 0.5)), np.eye(4)).data) - math.log(2)) < 1e-12
    two_thirds = abs(float(iou_loss(Tensor(np.array([1.0, 0, 1, 0])), np.array([1.0, 1, 0, 0])).data)
                     - 2 / 3) < 1e-6

    rows = []
    rng = np.random.default_rng(0)
    for _ in range(50):
        rows.append(PixelCounts().update(rng.random((8, 8)) < 0.3, rng.random((8, 8)) < 0.2).metrics())
    res = evaluate(build_model(ModelConfig()), load_dataset(DatasetSpec("synthetic", synth_root, "test")))
    rows += res.rows + [res.summary]
    identity = _f1_identity(rows)
    ok = worst < 1e-7 and ln2 and two_thirds and identity
    detail = (f"worst oracle gap {worst:.1e} < 1e-7, BCE(0.5) = ln 2 {ln2}, IoU 2/3 {two_thirds}, "
              f"F1 identity on {len(rows)} evaluations {identity}")
    assert acceptance(4, ok, detail)


def test_criterion_5_overfit(acceptance, tmp_path):
    synth_cracks(tmp_path, seed=0, count=1, split="train")
    ds = load_dataset(DatasetSpec("synthetic", tmp_path, "train"))
    cfg = TrainConfig(epochs=200, batch_size=1)
    assert (cfg.lr, cfg.beta1, cfg.beta2) == (1e-4, 0.5, 0.999)
    t0 = time.perf_counter()
    res = train(ModelConfig(), cfg, ds)
    seconds = time.perf_counter() - t0
    first, last = res.history[0]["L_all"], res.history[-1]["L_all"]
    drop = 1 - last / first
    f1 = evaluate(res.model, ds).summary["f1"]
    ok = len(res.history) == 200 and drop >= 0.90 and f1 >= 0.95 and seconds < 300
    detail = (f"L_all {first:.3f} -> {last:.3f}, drop {100 * drop:.1f}% >= 90%, "
              f"F1 {f1:.3f} >= 0.95, {seconds:.0f}s < 300s")
    assert acceptance(5, ok, detail)


def test_criterion_6_learning_sanity(acceptance, tmp_path):
    synth_cracks(tmp_path, seed=0, count=200, split="train")
    synth_cracks(tmp_path, seed=0, count=50, split="test")
    train_ds = load_dataset(DatasetSpec("synthetic", tmp_path, "train"))
    test_ds = load_dataset(DatasetSpec("synthetic", tmp_path, "test"))
    t0 = time.perf_counter()
    res = train(ModelConfig(), TrainConfig(epochs=10), train_ds)
    ev = evaluate(res.model, test_ds)
    seconds = time.perf_counter() - t0
    pos = sum(int(s.mask.sum()) for s in test_ds)
    total = sum(s.mask.size for s in test_ds)
    pi = pos / total
    # all-ones is the best constant predictor (all-zeros scores F1 = 0)
    const_f1 = 2 * pi / (1 + pi)
    f1 = ev.summary["f1"]
    ok = f1 - const_f1 >= 0.30 and seconds < 1800 and _f1_identity(ev.rows + [ev.summary])
    detail = f"held-out F1 {f1:.3f} vs constant {const_f1:.3f}, margin {f1 - const_f1:.3f} >= 0.30, {seconds:.0f}s"
    assert acceptance(6, ok, detail)


def test_criterion_7_ablation_parity(acceptance, synth_root):
    ds = load_dataset(DatasetSpec("synthetic", synth_root, "train"))
    mcfg, tcfg = ModelConfig(), TrainConfig(batch_size=1)
    params, finite = {}, True
    for table, rows in ablation.TABLES.items():
        for label, flags in rows:
            n, losses = ablation.single_step(mcfg, tcfg, ds, flags)
            params[label] = n
            finite &= all(math.isfinite(losses[k]) for k in ("L_all", "L_final", "L_global", "L_local"))
    base = params["DSM"]
    d_gf = params["DSM + gf_filter"] - base
    d_lf = params["DSM + lf_filter"] - base
    d_corr = params["DSM + corr_fuse"] - base
    decm = [params[label] for label, _ in ablation.EDGE_ROWS[1:]]
    deltas = (d_gf > 0 and d_lf > 0 and d_corr > 0
              and params["DSM + filter"] == base + d_gf + d_lf
              and params["DSM + CoFuse"] == base + d_gf + d_lf + d_corr
              and params["DSFM"] == params["DSM + CoFuse"]
              and len(set(decm)) == 1 and decm[0] > params["DSFM"])

    fake = [ablation.AblationResult(t, label, name, 0, 0.5, 0.3)
            for t, rows in ablation.TABLES.items() for label, _ in rows for name in ("DeepCrack", "CRACK500")]
    structure = True
    for table, rows in ablation.TABLES.items():
        for metric in ("f1", "iou"):
            lines = ablation.format_table(fake, table, metric).splitlines()
            structure &= lines[0] == f"Model,DeepCrack,CRACK500,Average of {metric.upper()}"
            structure &= [ln.split(",")[0] for ln in lines[1:]] == [label for label, _ in rows]
    structure &= (len(ablation.FUSION_ROWS), len(ablation.EDGE_ROWS)) == (6, 4)
    ok = finite and deltas and structure
    detail = (f"10 rows built and stepped {finite}, parameter deltas gf +{d_gf} lf +{d_lf} corr +{d_corr} "
              f"decm +{decm[0] - params['DSFM']} exact {deltas}, table layout {structure}")
    assert acceptance(7, ok, detail), params


def test_criterion_8_reproducibility(acceptance, synth_root, tmp_path):
    train_ds = load_dataset(DatasetSpec("synthetic", synth_root, "train"))
    test_ds = load_dataset(DatasetSpec("synthetic", synth_root, "test"))
    cfg = TrainConfig(epochs=2, batch_size=2, augment=True, seed=11)
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        res = train(ModelConfig(seed=5), cfg, train_ds, out)
        evaluate(res.model, test_ds, out_csv=out / "metrics.csv")
        runs.append(out)
    files = ["metrics.csv", "train_log.csv", "epoch_001.dffm", "epoch_002.dffm", "final.dffm"]
    identical = all((runs[0] / f).read_bytes() == (runs[1] / f).read_bytes() for f in files)

    full = train(ModelConfig(seed=5), cfg, train_ds)
    resumed = train(ModelConfig(seed=5), cfg, train_ds, tmp_path / "r", resume=runs[0] / "epoch_001.dffm")
    k = len(full.history) - len(resumed.history)
    resume_ok = (resumed.history[0]["step"] == k + 1
                 and all(r == f for r, f in zip(resumed.history, full.history[k:])))
    ok = identical and resume_ok
    detail = f"byte-identical {', '.join(files)} {identical}, resume at step {k + 1} matches {resume_ok}"
    assert acceptance(8, ok, detail)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
