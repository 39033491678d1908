from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from varivit import batching as bt
from varivit.encoder import ModelConfig, VariViT
from varivit.numerics import Rng
from varivit.patchify import extract_patches


class TestCBS:
    def test_three_remainder_batches(self):
        edges = [64] * 10 + [80] * 10 + [96] * 10
        plan = bt.plan_cbs(edges, 4, Rng(0))
        assert len(plan.batches) == 9
        assert Counter(map(len, plan.batches)) == {4: 6, 2: 3}
        assert all(len({edges[i] for i in b}) == 1 for b in plan.batches)

    def test_single_size_is_plain_shuffle(self):
        plan = bt.plan_cbs([32] * 10, 4, Rng(1))
        assert [len(b) for b in plan.batches] in ([4, 4, 2], [4, 2, 4], [2, 4, 4])
        assert sorted(plan.indices()) == list(range(10))
        assert plan.indices() != list(range(10))

    @given(st.lists(st.sampled_from([16, 24, 32]), min_size=1, max_size=60), st.integers(1, 9), st.integers(0, 99))
    @settings(max_examples=60)
    def test_homogeneous_and_exact_cover(self, edges, b, seed):
        plan = bt.plan_cbs(edges, b, Rng(seed))
        assert sorted(plan.indices()) == list(range(len(edges)))
        assert all(1 <= len(batch) <= b and len({edges[i] for i in batch}) == 1 for batch in plan.batches)

    def test_seeded(self):
        edges = [16, 24, 32] * 7
        assert bt.plan_cbs(edges, 3, Rng(5)) == bt.plan_cbs(edges, 3, Rng(5))
        assert bt.plan_cbs(edges, 3, Rng(5)).batches != bt.plan_cbs(edges, 3, Rng(6)).batches

    def test_empty(self):
        with pytest.raises(ValueError):
            bt.plan_cbs([], 4, Rng(0))


class TestGA:
    def test_update_points(self):
        plan = bt.plan_ga([16] * 30, 8, Rng(0))
        sizes = [sum(len(b) for b in g) for g in plan.update_groups()]
        assert sizes == [8, 8, 8, 6]
        assert list(np.cumsum(sizes)) == [8, 16, 24, 30]

    def test_batch_one(self):
        plan = bt.plan_ga([16, 24, 32], 1, Rng(0))
        assert [len(g) for g in plan.update_groups()] == [1, 1, 1]


class TestPad:
    def test_sequence_length(self, tiny_vols):
        plan = bt.plan_pad_to_max(tiny_vols, 4, Rng(0))
        assert sorted(plan.indices()) == list(range(len(tiny_vols)))
        for i in plan.indices():
            x = bt.pad_to_edge(tiny_vols[i].voxels, 96)
            assert extract_patches(x, 16).shape[0] == 216

    @pytest.mark.parametrize("edge,target", [(16, 32), (24, 32), (8, 11), (32, 32)])
    def test_symmetric(self, edge, target):
        x = np.ones((1, edge, edge, edge))
        out = bt.pad_to_edge(x, target)
        assert out.shape == (1, target, target, target)
        nz = np.nonzero(out[0].any(axis=(1, 2)))[0]
        before, after = nz[0], target - 1 - nz[-1]
        assert 0 <= after - before <= 1
        assert out.sum() == x.sum()

    def test_too_large(self):
        with pytest.raises(ValueError):
            bt.pad_to_edge(np.ones((1, 4, 4, 4)), 3)


class TestCost:
    def test_equal_thirds(self):
        edges = [64, 80, 96] * 4
        cbs = bt.token_cost(bt.plan_cbs(edges, 4, Rng(0)), edges, 16)
        pad = bt.token_cost(bt.plan_pad_to_max(edges, 4, Rng(0)), edges, 16)
        assert cbs == (4 * (64 + 125 + 216), 4 * (64 ** 2 + 125 ** 2 + 216 ** 2))
        assert pad == (12 * 216, 12 * 216 ** 2)
        assert 1 - Fraction(cbs[0], pad[0]) == Fraction(3, 8)

    def test_ga_costs_like_cbs(self):
        edges = [64, 80, 96, 96, 64]
        a = bt.token_cost(bt.plan_cbs(edges, 2, Rng(0)), edges, 16)
        b = bt.token_cost(bt.plan_ga(edges, 2, Rng(0)), edges, 16)
        assert a == b

    def test_single_size_no_saving(self):
        edges = [80] * 6
        assert bt.token_cost(bt.plan_cbs(edges, 4, Rng(0)), edges, 16) == \
            bt.token_cost(bt.plan_pad_to_max(edges, 4, Rng(0)), edges, 16)


class TestPlanText:
    @pytest.mark.parametrize("mode", bt.MODES)
    def test_round_trip(self, mode, tmp_path):
        plan = bt.make_plan(mode, [16, 24, 32, 16, 16], 2, Rng(3))
        plan.save(tmp_path / "plan.txt")
        assert bt.BatchPlan.from_text((tmp_path / "plan.txt").read_text()) == plan

    def test_alias(self):
        assert bt.make_plan("pad", [16], 1, Rng(0)).mode == bt.PAD


def _ga_vs_joint(dtype):
    cfg = ModelConfig.tiny(depth=1, posemb="relative")
    model = VariViT(cfg, seed=2, dtype=dtype)
    x = np.random.default_rng(0).random((8, 8, cfg.patch_dim)).astype(dtype)
    up = np.random.default_rng(1).normal(size=(8, 2)).astype(dtype)
    _, cache = model.forward(x, (2, 2, 2))
    joint = model.backward(cache, up / 8)
    acc = None
    for i in range(8):
        _, c = model.forward(x[i:i + 1], (2, 2, 2))
        g = model.backward(c, up[i:i + 1] / 8)
        acc = g if acc is None else {k: acc[k] + g[k] for k in acc}
    return max(float(np.abs(joint[k] - acc[k]).max()) for k in joint)


class TestGAEquivalence:
    def test_float64(self):
        assert _ga_vs_joint(np.float64) <= 1e-10

    def test_float32(self):
        assert _ga_vs_joint(np.float32) <= 1e-5
