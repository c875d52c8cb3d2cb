import logging

import numpy as np
import pytest
from PIL import Image

from dualcrack import ablation, cli
from dualcrack import checkpoint as ckpt
from dualcrack.config import ConfigError, ModelConfig, TrainConfig, format_config, parse_config_text
from dualcrack.data import DatasetSpec, MissingMaskError, load_dataset, split_stems
from dualcrack.synth import MAX_POSITIVE_FRACTION, synth_cracks
from dualcrack.train import (SUMMARY_STEM, evaluate, evaluate_predictions, load_model, make_checkpoint,
                             train)

TINY = ModelConfig(base_channels=8, local_channels=(8, 8, 16, 16), se_reduction=4, image_size=32)


def _write_pair(img_dir, mask_dir, stem, mask):
    img_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full(mask.shape + (3,), 128, np.uint8), "RGB").save(img_dir / f"{stem}.jpg")
    Image.fromarray(mask, "L").save(mask_dir / f"{stem}.png")


@pytest.fixture
def deepcrack_root(tmp_path):
    mask = np.zeros((40, 36), np.uint8)
    mask[10:20, 5:9] = 255
    mask[0, 0] = 127  # below the binarization cut
    mask[0, 1] = 128
    for stem in ("b", "a", "c"):
        _write_pair(tmp_path / "train_img", tmp_path / "train_lab", stem, mask)
    _write_pair(tmp_path / "test_img", tmp_path / "test_lab", "t0", mask)
    return tmp_path, mask


def test_deepcrack_layout_loads_sorted_and_padded(deepcrack_root):
    root, mask = deepcrack_root
    ds = load_dataset(DatasetSpec("DeepCrack", root, "train"))
    assert ds.stems == ["a", "b", "c"]
    s = ds[0]
    assert s.orig_hw == (40, 36)
    assert s.image.shape == (3, 64, 64) and s.mask.shape == (1, 64, 64)
    np.testing.assert_array_equal(s.mask[0, :40, :36], (mask >= 128).astype(np.uint8))


def test_missing_mask_names_the_stem(deepcrack_root):
    root, _ = deepcrack_root
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(root / "train_img" / "orphan.png")
    with pytest.raises(MissingMaskError, match="orphan"):
        load_dataset(DatasetSpec("DeepCrack", root, "train"))


def test_empty_split_warns(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        ds = load_dataset(DatasetSpec("CFD", tmp_path, "train"))
    assert len(ds) == 0 and "empty" in caplog.text


def test_unreadable_file_is_skipped(deepcrack_root, caplog):
    root, _ = deepcrack_root
    (root / "train_img" / "bad.png").write_bytes(b"not an image")
    Image.fromarray(np.zeros((8, 8), np.uint8)).save(root / "train_lab" / "bad.png")
    with caplog.at_level(logging.WARNING):
        ds = load_dataset(DatasetSpec("DeepCrack", root, "train"))
    assert ds.skipped == ["bad"] and len(ds) == 3
    assert "bad" in caplog.text


def test_splits_are_disjoint(synth_root):
    splits = split_stems(synth_root, "synthetic")
    assert len(splits["train"]) == 6 and len(splits["test"]) == 3
    assert not set(splits["train"]) & set(splits["test"])


def test_synth_is_deterministic(tmp_path):
    a = synth_cracks(tmp_path / "a", seed=5, count=3)
    b = synth_cracks(tmp_path / "b", seed=5, count=3)
    for sub in ("images", "masks"):
        for p in sorted((a / sub).iterdir()):
            assert p.read_bytes() == (b / sub / p.name).read_bytes()


def test_synth_statistics(synth_root):
    ds = load_dataset(DatasetSpec("synthetic", synth_root, "train"))
    for s in ds:
        frac = s.mask.mean()
        assert 0 < frac < MAX_POSITIVE_FRACTION
        gray = s.image.mean(axis=0)
        assert gray[s.mask[0] == 1].mean() < gray[s.mask[0] == 0].mean()


def test_checkpoint_roundtrip_is_byte_identical(tmp_path):
    from dualcrack.model import build_model
    from dualcrack.optim import Adam

    model = build_model(TINY)
    ck = make_checkpoint(model, Adam(model.parameters()), 7, np.random.default_rng(0))
    first = ckpt.save(ck, tmp_path / "a.dffm")
    second = ckpt.save(ckpt.load(first), tmp_path / "b.dffm")
    assert first.read_bytes() == second.read_bytes()
    assert first.read_bytes()[:4] == b"DFFM"
    with pytest.raises(ckpt.DigestMismatch):
        load_model(first, TINY.replace(base_channels=16))
    with pytest.raises(ckpt.CheckpointError):
        ckpt.from_bytes(first.read_bytes()[:-4])


def test_zero_lr_leaves_parameters_unchanged(synth_root):
    from dualcrack.model import build_model

    ds = load_dataset(DatasetSpec("synthetic", synth_root, "train"))
    before = build_model(TINY).state_dict()
    res = train(TINY, TrainConfig(lr=0.0, max_steps=2, epochs=1), ds)
    for k, v in res.model.state_dict().items():
        assert np.array_equal(v, before[k])


def test_resume_matches_uninterrupted(synth_root, tmp_path):
    ds = load_dataset(DatasetSpec("synthetic", synth_root, "train"))
    cfg = TrainConfig(epochs=1, max_steps=3, batch_size=2, augment=True)
    full = train(TINY, cfg, ds)
    part = train(TINY, cfg.replace(max_steps=2), ds, tmp_path)
    resumed = train(TINY, cfg, ds, tmp_path / "r", resume=part.checkpoint)
    assert resumed.history[0]["step"] == 3
    assert resumed.history[0]["L_all"] == full.history[2]["L_all"]


def test_eval_self_consistency(synth_root, tmp_path):
    ds = load_dataset(DatasetSpec("synthetic", synth_root, "test"))
    truth = {s.stem: s.mask[0, :s.orig_hw[0], :s.orig_hw[1]] for s in ds}
    perfect = evaluate_predictions(truth, ds).summary
    assert perfect["f1"] == 1.0 and perfect["iou"] == 1.0
    zero = evaluate_predictions({k: np.zeros_like(v) for k, v in truth.items()}, ds).summary
    assert zero["f1"] == 0.0 and zero["iou"] == 0.0
    from dualcrack.model import build_model

    res = evaluate(build_model(TINY), ds, out_csv=tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert len(lines) == 1 + len(ds) + 1
    assert lines[-1].startswith(SUMMARY_STEM)
    s = res.summary
    assert s["f1"] == pytest.approx(2 * s["iou"] / (1 + s["iou"]), abs=1e-12)


def test_config_parsing():
    m, t = parse_config_text("model.base_channels = 8\nlr = 1e-3  # comment\ntrain.epochs = 2\n")
    assert m == {"base_channels": 8} and t == {"lr": 1e-3, "epochs": 2}
    with pytest.raises(ConfigError, match="bogus"):
        parse_config_text("bogus = 1")
    with pytest.raises(ConfigError):
        parse_config_text("train.epochs = many")
    text = format_config(TINY, TrainConfig())
    m2, t2 = parse_config_text(text)
    assert ModelConfig(**m2) == TINY and TrainConfig(**t2) == TrainConfig()


def test_ablation_rejects_unknown_flag():
    with pytest.raises(ConfigError, match="valid flags"):
        ablation.apply_flags(ModelConfig(), TrainConfig(), {"decm": True, "turbo": True})


def test_ablation_tables_render():
    results = [ablation.AblationResult("edge", label, "synthetic", 1, 0.5, 0.25)
               for label, _ in ablation.EDGE_ROWS]
    lines = ablation.format_table(results, "edge", "f1").splitlines()
    assert lines[0].split(",")[0] == "Model" and "synthetic" in lines[0]
    assert [ln.split(",")[0] for ln in lines[1:]] == [label for label, _ in ablation.EDGE_ROWS]


def test_cli_end_to_end(synth_root, tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(format_config(TINY, TrainConfig(epochs=1, batch_size=2)))
    run = tmp_path / "run"
    common = ["--config", str(cfg), "--root", str(synth_root), "--out", str(run)]
    assert cli.main(["train", *common]) == 0
    assert (run / "final.dffm").exists() and (run / "loss_curves.png").exists()
    assert cli.main(["eval", *common, "--checkpoint", str(run / "final.dffm")]) == 0
    assert (run / "metrics.csv").exists() and (run / "metrics.png").exists()
    image = synth_root / "test" / "images" / "test_00000.png"
    assert cli.main(["infer", "--config", str(cfg), "--out", str(run), "--checkpoint",
                     str(run / "final.dffm"), "--image", str(image)]) == 0
    for name in ("test_00000_mask.png", "test_00000_overlay.png", "test_00000_panel.png"):
        assert (run / name).exists()
    mask = np.asarray(Image.open(run / "test_00000_mask.png"))
    assert mask.shape == (64, 64) and set(np.unique(mask)) <= {0, 255}
    # digest mismatch is a clean error, not a traceback
    assert cli.main(["eval", "--root", str(synth_root), "--out", str(run),
                     "--checkpoint", str(run / "final.dffm")]) == 2
    assert "digest" in capsys.readouterr().err


def test_cli_ablate_single_step(synth_root, tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(format_config(TINY))
    assert cli.main(["ablate", "--config", str(cfg), "--root", str(synth_root), "--out", str(tmp_path),
                     "--single-step"]) == 0
    rows = (tmp_path / "ablation_single_step.csv").read_text().splitlines()
    assert len(rows) == 1 + len(ablation.FUSION_ROWS) + len(ablation.EDGE_ROWS)


def test_cli_gradcheck_exit_code(capsys):
    assert cli.main(["gradcheck", "--scope", "ops"]) == 0
    assert "checks in" in capsys.readouterr().out


def test_cli_rejects_unknown_config_key(tmp_path, synth_root, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("model.nope = 1\n")
    assert cli.main(["train", "--config", str(cfg), "--root", str(synth_root), "--out", str(tmp_path)]) == 2
    assert "nope" in capsys.readouterr().err
