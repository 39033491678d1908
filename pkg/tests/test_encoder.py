import numpy as np
import pytest

from varivit import encoder as enc
from varivit.encoder import ModelConfig, VariViT
from varivit.numerics import layernorm
from conftest import model_gradcheck


def _patches(cfg, n, batch=2, seed=0):
    return np.random.default_rng(seed).random((batch, n, cfg.patch_dim), dtype=np.float32)


class TestConfig:
    def test_full_size_preset(self):
        cfg = ModelConfig.paper()
        assert (cfg.depth, cfg.embed_dim, cfg.heads, cfg.patch_size) == (12, 384, 6, 16)
        assert cfg.max_grid == (6, 6, 6)
        # roughly the 28M of a ViT-S-sized encoder with a 64^3*4 patch projection
        assert 27e6 < enc.param_count(cfg) < 29e6

    def test_text_round_trip(self):
        cfg = ModelConfig.tiny(posemb=enc.RELATIVE, num_classes=3)
        assert ModelConfig.from_text(cfg.to_text()) == cfg

    @pytest.mark.parametrize("kw", [dict(posemb="bogus"), dict(embed_dim=25), dict(max_image_edge=30)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig.tiny(**kw)

    def test_strategy_parameters(self):
        names = lambda s: set(enc.param_shapes(ModelConfig.tiny(posemb=s)))
        assert "pos" in names(enc.INTERP_LEARNED) and "pos" not in names(enc.CENTER_SELECT)
        assert "rel.table" in names(enc.RELATIVE)
        assert names(enc.CENTER_SELECT) == names(enc.INDEP_FIXED) == names(enc.INTERP_FIXED)


class TestForward:
    def test_one_parameter_set_all_sizes(self):
        cfg = ModelConfig.paper(depth=1, embed_dim=12, heads=2)
        model = VariViT(cfg)
        before = {k: v.copy() for k, v in model.params.items()}
        for edge in (64, 80, 96):
            g = (edge // 16,) * 3
            x = np.random.default_rng(edge).random((1, int(np.prod(g)), cfg.patch_dim), dtype=np.float32)
            logits, cache = model.forward(x, g)
            assert logits.shape == (1, 2)
            assert cache["blocks"][0]["a"].shape == (1, 2, np.prod(g) + 1, np.prod(g) + 1)
        assert all(np.array_equal(before[k], model.params[k]) for k in before)

    def test_attention_rows_sum_to_one(self):
        cfg = ModelConfig.tiny()
        model = VariViT(cfg)
        _, cache = model.forward(_patches(cfg, 27), (3, 3, 3))
        for blk in cache["blocks"]:
            np.testing.assert_allclose(blk["a"].sum(-1), 1.0, atol=1e-6)

    def test_depth_zero_is_head_of_cls(self):
        cfg = ModelConfig.tiny(depth=0)
        model = VariViT(cfg)
        logits, _ = model.forward(_patches(cfg, 8), (2, 2, 2))
        expect = model.params["cls"] @ model.params["head.w"] + model.params["head.b"]
        np.testing.assert_allclose(logits, np.tile(expect, (2, 1)), rtol=1e-6)

    def test_pre_norm_first_block_input(self):
        cfg = ModelConfig.tiny(depth=1)
        model = VariViT(cfg)
        x = _patches(cfg, 8)
        _, cache = model.forward(x, (2, 2, 2))
        p = model.params
        tok = x @ p["patch.w"] + p["patch.b"] + model.positions((2, 2, 2))
        seq = np.concatenate([np.broadcast_to(p["cls"], (2, 1, cfg.embed_dim)), tok], 1)
        h, _ = layernorm(seq, p["blocks.0.ln1.g"], p["blocks.0.ln1.b"])
        np.testing.assert_allclose(cache["blocks"][0]["h"], h, atol=1e-5)

    def test_wrong_patch_count(self):
        cfg = ModelConfig.tiny()
        with pytest.raises(ValueError):
            VariViT(cfg).forward(_patches(cfg, 9), (2, 2, 2))

    @pytest.mark.parametrize("s", enc.STRATEGIES)
    def test_every_strategy_runs(self, s):
        cfg = ModelConfig.tiny(posemb=s)
        logits, _ = VariViT(cfg).forward(_patches(cfg, 27), (3, 3, 3))
        assert np.all(np.isfinite(logits))

    def test_positions_by_strategy(self):
        cs = VariViT(ModelConfig.tiny(posemb=enc.CENTER_SELECT))
        ind = VariViT(ModelConfig.tiny(posemb=enc.INDEP_FIXED))
        # the full grid is the same under both
        np.testing.assert_array_equal(cs.positions((4, 4, 4)), ind.positions((4, 4, 4)))
        # a smaller grid is a centered crop for one and an origin-anchored grid for the other
        assert not np.array_equal(cs.positions((2, 2, 2)), ind.positions((2, 2, 2)))
        np.testing.assert_array_equal(cs.positions((2, 2, 2))[0], cs.master.grid[1, 1, 1])
        assert VariViT(ModelConfig.tiny(posemb=enc.RELATIVE)).positions((2, 2, 2)) is None

    def test_relative_bias_spares_cls(self):
        cfg = ModelConfig.tiny(posemb=enc.RELATIVE)
        model = VariViT(cfg)
        b = model.relative_bias((2, 2, 2))
        assert b.shape == (2, 9, 9)
        assert not b[:, 0].any() and not b[:, :, 0].any()
        assert b[:, 1:, 1:].any()


class TestBackward:
    @pytest.mark.parametrize("s", enc.STRATEGIES)
    def test_gradcheck(self, s):
        bad = {k: v for k, v in model_gradcheck(s).items() if not v.ok(1e-6)}
        assert not bad

    def test_zero_upstream(self):
        cfg = ModelConfig.tiny(posemb=enc.INTERP_LEARNED)
        model = VariViT(cfg)
        _, cache = model.forward(_patches(cfg, 8), (2, 2, 2))
        grads = model.backward(cache, np.zeros((2, 2)))
        assert not any(g.any() for g in grads.values())

    def test_grad_keys_and_shapes(self):
        cfg = ModelConfig.tiny(posemb=enc.RELATIVE)
        model = VariViT(cfg)
        _, cache = model.forward(_patches(cfg, 8), (2, 2, 2))
        grads = model.backward(cache, np.ones((2, 2)))
        assert {k: g.shape for k, g in grads.items()} == {k: p.shape for k, p in model.params.items()}

    def test_missing_cache(self):
        with pytest.raises(ValueError):
            VariViT(ModelConfig.tiny()).backward(None, np.zeros(2))


class TestAttention:
    def test_near_uniform_at_init(self):
        cfg = ModelConfig.tiny()
        model = VariViT(cfg)
        _, cache = model.forward(_patches(cfg, 64), (4, 4, 4))
        a = model.attention_map(cache, 0, 1)
        # small init weights give nearly flat scores
        np.testing.assert_allclose(a, 1 / 65, rtol=0.05)

    def test_cls_attention_mass(self):
        cfg = ModelConfig.tiny()
        model = VariViT(cfg)
        _, cache = model.forward(_patches(cfg, 27), (3, 3, 3))
        m = model.cls_attention(cache, 1)
        assert m.shape == (3, 3, 3)
        a = cache["blocks"][1]["a"][0].mean(0)
        assert m.sum() == pytest.approx(1.0 - a[0, 0], abs=1e-6)
        assert m.sum() <= 1.0


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = ModelConfig.tiny(posemb=enc.INTERP_LEARNED)
        model = VariViT(cfg, seed=4)
        model.save(tmp_path)
        back = VariViT.load(tmp_path)
        assert back.cfg == cfg
        x = _patches(cfg, 8)
        assert model.forward(x, (2, 2, 2))[0].tobytes() == back.forward(x, (2, 2, 2))[0].tobytes()

    def test_shape_mismatch(self, tmp_path):
        VariViT(ModelConfig.tiny()).save(tmp_path)
        (tmp_path / "config.txt").write_text(ModelConfig.tiny(embed_dim=36, heads=2).to_text())
        with pytest.raises(ValueError, match="shape"):
            VariViT.load(tmp_path)


def test_cache_bytes_grow_with_grid():
    cfg = ModelConfig.tiny()
    model = VariViT(cfg)
    small = enc.cache_nbytes(model.forward(_patches(cfg, 8), (2, 2, 2))[1])
    big = enc.cache_nbytes(model.forward(_patches(cfg, 64), (4, 4, 4))[1])
    assert big > 4 * small
