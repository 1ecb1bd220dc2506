import dataclasses

import numpy as np
import pytest

from sparse3d.attention import CORE_TAG, PROJ_TAG
from sparse3d.checkpoint import load_checkpoint, save_checkpoint
from sparse3d.counter import count_ops
from sparse3d.distill import synthetic_volume
from sparse3d.encoder import (ViTConfig, block, encode, init_params, make_student_config,
                              make_teacher_config, param_checksum, patch_embed_3d)
from sparse3d.rng import Rng
from sparse3d.tensor import Tensor


@pytest.fixture(scope="module")
def student():
    cfg = make_student_config("toy")
    return cfg, init_params(cfg, Rng(0).fork("student"))


@pytest.fixture(scope="module")
def volume():
    return synthetic_volume(32, Rng(0).fork("vol"))


class TestConfigs:
    def test_full_scale_shapes(self):
        t, s = make_teacher_config("paper"), make_student_config("paper")
        assert (t.input_extent, t.num_layers, t.num_heads) == (128, 12, 12)
        assert (s.num_layers, s.num_heads, s.ffn_only_prefix) == (6, 6, 2)

    def test_toy_shapes(self):
        t, s = make_teacher_config("toy"), make_student_config("toy")
        assert (t.input_extent, t.patch_size, t.embed_dim) == (32, 8, 64)
        assert (t.num_layers, t.num_heads, s.num_layers, s.num_heads) == (12, 8, 6, 4)

    def test_student_tokens_fit_plan(self):
        s = make_student_config("toy")
        assert s.num_tokens % (s.segment_size * s.dilation) == 0

    def test_unknown_scale(self):
        with pytest.raises(ValueError):
            make_teacher_config("huge")

    @pytest.mark.parametrize("kw", [dict(input_extent=30), dict(ffn_only_prefix=7),
                                    dict(attention_variant="dense")])
    def test_invalid(self, kw):
        base = dict(input_extent=32, patch_size=8, embed_dim=16, num_layers=6, num_heads=2)
        with pytest.raises(ValueError):
            ViTConfig(**{**base, **kw})

    def test_incompatible_segment_override(self):
        with pytest.raises(ValueError):
            make_student_config("toy", segment_size=5)


class TestPatchEmbed:
    def test_token_count(self, student, volume):
        cfg, params = student
        assert patch_embed_3d(volume, cfg, params).shape == (64, cfg.embed_dim)

    def test_zero_volume(self, student):
        cfg, params = student
        got = patch_embed_3d(np.zeros((32,) * 3), cfg, params).data
        want = params["patch.bias"].data + params["pos_embed"].data
        np.testing.assert_array_equal(got, want)

    def test_linearity(self, student, volume):
        cfg, params = student
        e = lambda v: patch_embed_3d(v, cfg, params).data.astype(np.float64)
        e0 = e(np.zeros_like(volume))
        np.testing.assert_allclose(e(2 * volume) - e0, 2 * (e(volume) - e0), atol=1e-5, rtol=0)

    def test_raster_order(self):
        cfg = ViTConfig(4, 2, 8, 1, 2)
        params = init_params(cfg, Rng(0))
        vol = np.zeros((4, 4, 4))
        vol[2:4, 0:2, 2:4] = 1.0     # grid cell (1, 0, 1) -> token 1*4 + 0*2 + 1 = 5
        delta = patch_embed_3d(vol, cfg, params).data - patch_embed_3d(np.zeros_like(vol), cfg, params).data
        assert np.flatnonzero(np.abs(delta).sum(1)).tolist() == [5]

    def test_bad_volume(self, student):
        cfg, params = student
        with pytest.raises(ValueError):
            patch_embed_3d(np.zeros((32, 32, 30)), cfg, params)


class TestEncode:
    def test_teacher_layer_count(self, volume):
        cfg = make_teacher_config("toy")
        outs = encode(volume, cfg, init_params(cfg, Rng(1)))
        assert len(outs) == 12
        assert {o.shape for o in outs.layers} == {(64, 64)} and outs.final.shape == (64, 64)

    def test_prefix_blocks_do_no_attention(self, student, volume):
        cfg, params = student
        x = patch_embed_3d(volume, cfg, params)
        for i in range(cfg.num_layers):
            with count_ops() as c:
                x = block(x, cfg, params, i)
            attn = c.tag_flops(CORE_TAG) + c.tag_flops(PROJ_TAG)
            assert (attn == 0) == (i < cfg.ffn_only_prefix)
        assert not any(k.startswith(("blocks.0.attn", "blocks.1.attn")) for k in params)

    def test_prefix_outputs_ignore_attention_weights(self, volume):
        full_cfg = make_student_config("toy", ffn_only_prefix=0)
        params = init_params(full_cfg, Rng(2))
        cfg = dataclasses.replace(full_cfg, ffn_only_prefix=2)
        before = encode(volume, cfg, params)
        noisy = dict(params)
        r = Rng(3)
        for i in range(2):
            for n in ("wq", "wk", "wv", "wo", "bq", "bo"):
                key = f"blocks.{i}.attn.{n}"
                noisy[key] = Tensor(params[key].data + r.normal(params[key].shape))
        after = encode(volume, cfg, noisy)
        for i in range(2):
            np.testing.assert_array_equal(before.layers[i].data, after.layers[i].data)

    def test_deterministic(self, student, volume):
        cfg, params = student
        a, b = encode(volume, cfg, params), encode(volume, cfg, params)
        for x, y in zip(a.layers + [a.final], b.layers + [b.final]):
            assert x.data.tobytes() == y.data.tobytes()

    def test_naive_flash_agree_over_depth(self, volume):
        naive = make_teacher_config("toy")
        flash = dataclasses.replace(naive, attention_variant="flash")
        params = init_params(naive, Rng(4))
        a, b = encode(volume, naive, params), encode(volume, flash, params)
        for la, lb in zip(a.layers, b.layers):
            assert np.abs(la.data - lb.data).max() <= 1e-4
        assert np.abs(a.layers[0].data - b.layers[0].data).max() <= 1e-5


def test_checkpoint_roundtrip(tmp_path, student):
    cfg, params = student
    path = tmp_path / "s.ckpt"
    save_checkpoint(path, params, {"config": cfg.to_dict(), "seed": 0})
    loaded, meta = load_checkpoint(path)
    assert meta["seed"] == 0 and meta["config"]["num_layers"] == 6
    assert sorted(loaded) == sorted(params)
    for k, t in params.items():
        assert loaded[k].dtype == np.float32
        np.testing.assert_array_equal(loaded[k], t.data)
    restored = {k: Tensor(v) for k, v in loaded.items()}
    assert param_checksum(restored) == param_checksum(params)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(p)
