import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualcrack.autodiff import ConfigurationError, Tensor, ops
from dualcrack.cofuse import ChannelAttention, CoFuseLevel, CorrelationFuse, SpatialAttention
from dualcrack.config import ConfigError, ModelConfig
from dualcrack.decoupling import EdgeDecoupler, binarize, warp_body
from dualcrack.global_stream import CrossWindowAttention, GlobalStream
from dualcrack.gradcheck_suite import failures, run_scope
from dualcrack.local_stream import LocalStream, StageMerge, downsample2
from dualcrack.model import build_model


@pytest.fixture(scope="module")
def toy_out():
    cfg = ModelConfig()
    model = build_model(cfg)
    x = Tensor(np.random.default_rng(0).random((2, 3, 64, 64)).astype(np.float32))
    return cfg, model, model(x)


def test_blocks_scope_passes():
    assert failures(run_scope("blocks"), 1e-5) == []


def test_global_stage_law(toy_out):
    cfg, _, out = toy_out
    shapes = [tuple(s.shape[1:]) for s in out.global_feats.stages]
    assert shapes == [(16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 2, 2)]
    assert out.global_feats.fused.shape == (2, 4 * cfg.c_f, 16, 16)


def test_local_chain_law(toy_out):
    cfg, _, out = toy_out
    loc = out.local_feats
    c = cfg.local_channels
    assert [tuple(t.shape[1:]) for t in loc.down] == [(c[0], 32, 32), (c[1], 16, 16), (c[2], 8, 8), (c[3], 4, 4)]
    for i in range(4):
        assert loc.up[i].shape == loc.down[i].shape
    for lvl in (2, 3, 4):
        assert loc.merged[lvl].shape == loc.down[lvl - 1].shape


def test_heads_emit_image_shape(toy_out):
    _, _, out = toy_out
    for t in (out.final_logits, out.global_logits, out.local_logits, out.edge_logits, out.body_logits):
        assert t.shape == (2, 1, 64, 64)


def test_attention_rows_and_cross_mask(rng):
    attn = CrossWindowAttention(8, 4, 2, rng)
    x = Tensor(rng.normal(size=(1, 4, 6, 8)))
    dense = attn.attention_matrix(x)
    np.testing.assert_allclose(dense.sum(-1), 1.0, atol=1e-6)
    tok = np.arange(24).reshape(4, 6)
    rows, cols = np.divmod(tok.reshape(-1), 6)
    same_hstripe = (rows[:, None] // 2) == (rows[None, :] // 2)
    same_vstripe = (cols[:, None] // 2) == (cols[None, :] // 2)
    # heads 0-1 horizontal stripes, heads 2-3 vertical stripes
    assert np.all(dense[:, :2][:, :, ~same_hstripe] == 0)
    assert np.all(dense[:, 2:][:, :, ~same_vstripe] == 0)
    assert np.all(dense[:, :2][:, :, same_hstripe] > 0)
    assert np.all(dense[:, 2:][:, :, same_vstripe] > 0)


def test_stripe_must_divide(rng):
    attn = CrossWindowAttention(8, 2, 3, rng)
    with pytest.raises(ConfigurationError):
        attn(Tensor(rng.normal(size=(1, 4, 4, 8))))
    with pytest.raises(ConfigError):
        ModelConfig(stripe_widths=(3, 2, 2, 0))


def test_full_extent_stripe_is_global_attention(rng):
    attn = CrossWindowAttention(8, 2, 0, rng)
    dense = attn.attention_matrix(Tensor(rng.normal(size=(1, 3, 3, 8))))
    assert np.all(dense > 0)


def test_global_stream_rejects_bad_heads():
    with pytest.raises(ConfigError):
        ModelConfig(heads=(3, 2, 4, 4))


def test_merge_identity_projection(rng):
    merge = StageMerge(3, rng, norm_act=False)
    merge.proj.weight.data[...] = 0
    merge.proj.weight.data[:, :3, 0, 0] = np.eye(3)
    merge.proj.bias.data[...] = 0
    down = Tensor(rng.normal(size=(1, 3, 4, 4)).astype(np.float32))
    up = Tensor(rng.normal(size=(1, 3, 4, 4)).astype(np.float32))
    np.testing.assert_array_equal(merge(down, up).data, down.data)


def test_merge_shape_mismatch(rng):
    merge = StageMerge(3, rng)
    with pytest.raises(RuntimeError, match="misconfigured"):
        merge(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 3, 2, 2))))


def test_odd_extent_downsample_covers_every_pixel():
    x = Tensor(np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5))
    out = downsample2(x).data
    assert out.shape == (1, 1, 3, 3)
    assert out[0, 0, 2, 2] == 24


def test_local_stream_odd_input(rng):
    cfg = ModelConfig(local_channels=(4, 4, 4, 4), se_reduction=2)
    out = LocalStream(cfg, rng)(Tensor(rng.random((1, 3, 24, 20))))
    for i in range(4):
        assert out.up[i].shape == out.down[i].shape


def test_se_squeeze_matches_scalar_loop(rng):
    x = rng.normal(size=(2, 4, 3, 5))
    se = ChannelAttention(4, 2, rng)
    got = se.squeeze(Tensor(x)).data.reshape(2, 4)
    ref = np.zeros((2, 4))
    for b in range(2):
        for c in range(4):
            total = 0.0
            for i in range(3):
                for j in range(5):
                    total += x[b, c, i, j]
            ref[b, c] = total / 15
    np.testing.assert_allclose(got, ref, atol=1e-6)


def test_se_gate_in_unit_interval(rng):
    se = ChannelAttention(4, 2, rng)
    g = se.gate(Tensor(rng.normal(size=(2, 4, 3, 3)))).data
    assert g.shape == (2, 4, 1, 1) and np.all((g > 0) & (g < 1))


def test_spatial_attention_zero_weights_halves(rng):
    sa = SpatialAttention(rng)
    sa.conv.weight.data[...] = 0
    x = rng.normal(size=(1, 3, 5, 5)).astype(np.float32)
    np.testing.assert_array_equal(sa(Tensor(x)).data, x * np.float32(0.5))


def test_corr_map_channel_sums(rng):
    fuse = CorrelationFuse(4, 6, rng)
    out = fuse(Tensor(rng.normal(size=(2, 4, 3, 3))), Tensor(rng.normal(size=(2, 4, 3, 3))))
    np.testing.assert_allclose(out.corr_map.data.sum(axis=1), 1.0, atol=1e-6)
    assert out.fused.shape == (2, 6, 3, 3)


def test_corr_fuse_rejects_spatial_mismatch(rng):
    fuse = CorrelationFuse(2, 2, rng)
    with pytest.raises(RuntimeError):
        fuse(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 2, 2))))


def test_cofuse_flags_change_parameter_count(rng):
    counts = {}
    for flags in [(False, False, False), (True, False, False), (False, True, False), (False, False, True)]:
        lvl = CoFuseLevel(8, 4, 4, 2, np.random.default_rng(0), *flags)
        counts[flags] = lvl.num_parameters()
    base = counts[(False, False, False)]
    assert counts[(True, False, False)] == base + 4 * 2 + 2 * 4
    assert counts[(False, True, False)] == base + 2 * 7 * 7
    assert counts[(False, False, True)] > base


def test_grid_sample_zero_flow_identity(rng):
    x = rng.normal(size=(2, 3, 5, 4)).astype(np.float32)
    out = ops.grid_sample(Tensor(x), Tensor(np.zeros((2, 2, 5, 4), np.float32))).data
    assert np.array_equal(out, x)


@settings(max_examples=30, deadline=None)
@given(st.integers(-3, 3), st.integers(-3, 3))
def test_grid_sample_integer_shift_oracle(dx, dy):
    x = np.arange(30, dtype=np.float64).reshape(1, 1, 5, 6)
    flow = np.zeros((1, 2, 5, 6))
    flow[:, 0], flow[:, 1] = dx, dy
    out = ops.grid_sample(Tensor(x), Tensor(flow)).data[0, 0]
    for i in range(5):
        for j in range(6):
            assert out[i, j] == x[0, 0, min(max(i + dy, 0), 4), min(max(j + dx, 0), 5)]


def test_decm_zero_flow_and_conservation(rng):
    dec = EdgeDecoupler(4, 3, rng)
    f = Tensor(rng.normal(size=(1, 4, 6, 6)).astype(np.float32))
    low = Tensor(rng.normal(size=(1, 3, 12, 12)).astype(np.float32))
    out = dec(f, low)
    assert np.all(out.flow.data == 0)
    assert np.array_equal(out.body.data, f.data)
    assert np.array_equal((f - out.body).data, np.zeros_like(f.data))
    assert np.array_equal(out.final.data, out.edge.data + out.body.data)


def test_decm_conservation_with_nonzero_flow(rng):
    dec = EdgeDecoupler(4, 3, rng)
    dec.flow.gamma.weight.data = rng.normal(size=dec.flow.gamma.weight.shape).astype(np.float32)
    out = dec(Tensor(rng.normal(size=(1, 4, 6, 6)).astype(np.float32)),
              Tensor(rng.normal(size=(1, 3, 6, 6)).astype(np.float32)))
    assert np.any(out.flow.data != 0)
    assert np.array_equal(out.final.data, out.edge.data + out.body.data)
    assert np.array_equal(warp_body(Tensor(out.body.data), Tensor(np.zeros_like(out.flow.data))).data,
                          out.body.data)


def test_binarize_threshold_is_strict():
    np.testing.assert_array_equal(binarize(np.array([0.49, 0.5, 0.51])), [0, 0, 1])


def test_model_without_decm(rng):
    model = build_model(ModelConfig(decm=False))
    out = model(Tensor(rng.random((1, 3, 64, 64)).astype(np.float32)))
    assert out.edge_logits is None and out.decoupled is None
    assert out.final_logits.shape == (1, 1, 64, 64)


def test_global_stream_alone(rng):
    g = GlobalStream(ModelConfig(image_size=32), rng)(Tensor(rng.random((1, 3, 32, 32))))
    assert [s.shape[2] for s in g.stages] == [8, 4, 2, 1]
