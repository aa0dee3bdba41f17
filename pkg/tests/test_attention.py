import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octattn import macs
from octattn import tensor as T
from octattn.attention import (
    INFER,
    TRAIN,
    OTBConfig,
    cross_attention,
    ffn,
    init_otb_params,
    lepe,
    mhsa_top,
    octree_attention,
    otb_apply,
    sample_octants,
    topk_select,
)
from octattn.grid import EMPTY, to_dense_batch
from octattn.oracle import dense_mhsa, dense_otb
from octattn.pyramid import IndexBank, build_pyramid
from octattn.sparse_conv import SubmConvParams
from octattn.tensor import Tensor, grad_check

from conftest import random_grid

SMALL = OTBConfig(d=8, heads=2, head_dim=4, height=3, k=3, keys=6)


def numpy_params(params):
    return {k: v.data for k, v in params.items()}


def level_params(params, n=0):
    return {name: params[f"level{n}.{name}"] for name in ("wq", "wk", "wv", "wh")}


def single_scene_batch(x):
    from octattn.grid import SparseVoxelGrid

    m = x.shape[0]
    coords = np.c_[np.arange(m), np.zeros(m), np.zeros(m)].astype(int)
    grid = SparseVoxelGrid(coords, np.zeros(m, int), Tensor(x), (1, 1, 1), (0, 0, 0), (100,) * 3)
    return to_dense_batch(grid)


class TestMhsaTop:
    def test_single_token(self, rng):
        p = level_params(init_otb_params(SMALL, rng))
        x = rng.normal(size=(1, 8))
        scores, feats = mhsa_top(single_scene_batch(x), p, SMALL)
        assert scores.data.tolist() == [[[2.0]]]
        ref = sum((x @ p["wv"].data[h]) @ p["wh"].data[h] for h in range(2))
        np.testing.assert_allclose(feats.data[0], ref, atol=1e-14)

    def test_identical_tokens(self, rng):
        p = level_params(init_otb_params(SMALL, rng))
        x = np.tile(rng.normal(size=(1, 8)), (2, 1))
        scores, feats = mhsa_top(single_scene_batch(x), p, SMALL)
        np.testing.assert_allclose(scores.data[0], [[1.0, 1.0], [1.0, 1.0]], atol=1e-15)
        np.testing.assert_array_equal(feats.data[0, 0], feats.data[0, 1])

    def test_matches_dense_oracle(self, rng):
        cfg = OTBConfig(d=64, heads=2, head_dim=32, height=1)
        p = level_params(init_otb_params(cfg, rng))
        x = rng.normal(size=(8, 64))
        scores, feats = mhsa_top(single_scene_batch(x), p, cfg)
        ref_s, ref_f = dense_mhsa(x, *(p[n].data for n in ("wq", "wk", "wv", "wh")), cfg.scale)
        assert np.abs(feats.data[0] - ref_f).max() < 1e-10
        assert np.abs(scores.data[0] - ref_s).max() < 1e-10

    def test_padding_is_invisible(self, make_grid, rng):
        grid = make_grid(rng, m=20, d=8, scenes=2)
        p = level_params(init_otb_params(SMALL, rng))
        tight = to_dense_batch(grid)
        loose = to_dense_batch(grid, pad_to=tight.m_max + 9)
        _, f1 = mhsa_top(tight, p, SMALL)
        s2, f2 = mhsa_top(loose, p, SMALL)
        v = tight.validity
        assert np.abs(f1.data[v] - f2.data[:, : tight.m_max][v]).max() <= 1e-12
        assert np.all(s2.data[:, :, tight.m_max:] == 0.0)

    def test_row_sums(self, make_grid, rng):
        grid = make_grid(rng, m=30, d=8, scenes=3)
        batch = to_dense_batch(grid, pad_to=20)
        scores, _ = mhsa_top(batch, level_params(init_otb_params(SMALL, rng)), SMALL)
        sums = scores.data.sum(axis=-1)
        assert np.abs(sums[batch.validity] - SMALL.heads).max() <= 1e-11


class TestTopk:
    def test_ordering(self):
        assert topk_select(np.array([0.9, 0.1, 0.5]), 2).tolist() == [0, 2]

    def test_saturation_and_padding(self):
        out = topk_select(np.array([[0.3, 0.2, 0.1]]), 5, np.array([[True, False, True]]))
        assert out.tolist() == [[0, 2, EMPTY, EMPTY, EMPTY]]

    def test_ties_lowest_index(self):
        assert topk_select(np.array([0.5, 0.7, 0.5, 0.5]), 3).tolist() == [1, 0, 2]

    def test_exhaustive(self):
        assert sorted(topk_select(np.array([0.1, 0.4, 0.2]), None).tolist()) == [0, 1, 2]

    def test_errors(self):
        with pytest.raises(ValueError):
            topk_select(np.array([1.0]), 0)
        with pytest.raises(ValueError):
            topk_select(np.array([1.0]), 1, mode=TRAIN)
        with pytest.raises(ValueError):
            topk_select(np.array([1.0]), 1, mode="eval")

    def test_gumbel_max_two_entries(self):
        scores = np.array([0.3, -0.4])
        draws = 100_000
        top = topk_select(np.tile(scores, (draws, 1)), 1, mode=TRAIN, rng=np.random.default_rng(7))
        p = np.exp(scores) / np.exp(scores).sum()
        freq = (top[:, 0] == 0).mean()
        assert abs(freq - p[0]) <= 3 * np.sqrt(p[0] * (1 - p[0]) / draws)

    def test_train_indices_distinct_and_valid(self, rng):
        scores = rng.normal(size=(200, 10))
        valid = rng.random((200, 10)) < 0.5
        valid[:, 0] = True
        out = topk_select(scores, 4, valid, TRAIN, rng)
        for row, ok in zip(out, valid):
            kept = row[row != EMPTY]
            assert len(set(kept)) == len(kept) == min(4, ok.sum())
            assert ok[kept].all()

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 6))
    def test_monotonicity(self, seed, k):
        rng = np.random.default_rng(seed)
        scores = rng.normal(size=8)
        before = topk_select(scores, k)
        j = int(before[rng.integers(len(before))])
        raised = scores.copy()
        raised[j] += rng.exponential()
        assert j in topk_select(raised, k)


def make_bank(children_lists):
    table = np.full((len(children_lists), 8), EMPTY)
    c2p = []
    start = 0
    for p, n in enumerate(children_lists):
        table[p, :n] = np.arange(start, start + n)
        c2p += [p] * n
        start += n
    return IndexBank(np.array(c2p), table)


class TestSampleOctants:
    def test_under_full(self):
        bank = make_bank([1, 2, 1])
        keys, valid = sample_octants(np.array([[0, 1, EMPTY]]), bank, 32)
        assert keys.shape == (1, 32)
        assert valid.sum() == 3 and (~valid).sum() == 29
        assert keys[0, :3].tolist() == [0, 1, 2]

    def test_truncation_is_seeded(self):
        bank = make_bank([8] * 8)
        sel = np.arange(8)[None, :]
        a, va = sample_octants(sel, bank, 32, TRAIN, np.random.default_rng(3))
        b, _ = sample_octants(sel, bank, 32, TRAIN, np.random.default_rng(3))
        c, _ = sample_octants(sel, bank, 32, TRAIN, np.random.default_rng(4))
        assert va.all() and len(set(a[0])) == 32
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        assert np.all(np.diff(a[0]) > 0)  # kept in candidate order

    def test_infer_takes_prefix(self):
        bank = make_bank([8] * 8)
        sel = np.array([[5, 2, 7, 0, 1, 3, 4, 6]])
        first, _ = sample_octants(sel, bank, 32)
        again, _ = sample_octants(sel, bank, 32)
        np.testing.assert_array_equal(first, again)
        assert first[0].tolist() == list(range(40, 48)) + list(range(16, 24)) + list(range(56, 64)) + list(range(0, 8))

    def test_no_truncation(self):
        bank = make_bank([8] * 8)
        keys, valid = sample_octants(np.arange(8)[None, :], bank, None)
        assert keys.shape == (1, 64) and valid.all()

    def test_train_sampling_is_roughly_uniform(self):
        bank = make_bank([8] * 8)
        sel = np.tile(np.arange(8), (4000, 1))
        keys, _ = sample_octants(sel, bank, 32, TRAIN, np.random.default_rng(0))
        freq = np.bincount(keys.ravel(), minlength=64) / 4000
        assert np.abs(freq - 0.5).max() < 0.05


class TestCrossAttention:
    def test_single_key(self, rng):
        p = level_params(init_otb_params(SMALL, rng))
        x = rng.normal(size=(5, 8))
        idx = np.full((5, 4), EMPTY)
        idx[:, 0] = [4, 3, 2, 1, 0]
        scores, feats = cross_attention(Tensor(x), idx, p, SMALL)
        assert np.all(scores.data[:, 0] == 2.0) and np.all(scores.data[:, 1:] == 0.0)
        ref = sum((x[idx[:, 0]] @ p["wv"].data[h]) @ p["wh"].data[h] for h in range(2))
        np.testing.assert_allclose(feats.data, ref, atol=1e-14)

    def test_self_only_key(self, rng):
        p = level_params(init_otb_params(SMALL, rng))
        x = rng.normal(size=(4, 8))
        _, feats = cross_attention(Tensor(x), np.arange(4)[:, None], p, SMALL)
        _, solo = mhsa_top(single_scene_batch(x[:1]), p, SMALL)
        np.testing.assert_allclose(feats.data[0], solo.data[0, 0], atol=1e-14)

    @pytest.mark.parametrize("chunk", [4096, 3])
    def test_full_keys_equal_self_attention(self, rng, chunk):
        cfg = OTBConfig(d=8, heads=2, head_dim=4, chunk_size=chunk)
        p = level_params(init_otb_params(cfg, rng))
        x = rng.normal(size=(11, 8))
        idx = np.tile(np.arange(11), (11, 1))
        scores, feats = cross_attention(Tensor(x), idx, p, cfg)
        ref_s, ref_f = mhsa_top(single_scene_batch(x), p, cfg)
        assert np.abs(feats.data - ref_f.data[0]).max() < 1e-10
        assert np.abs(scores.data - ref_s.data[0]).max() < 1e-10


class TestBlock:
    def test_lepe_identity_kernel(self, make_grid, rng):
        grid = make_grid(rng, m=30, d=8)
        ident = SubmConvParams.identity(8)
        out = lepe(grid, {"lepe.kernel": ident.kernel, "lepe.bias": ident.bias})
        np.testing.assert_array_equal(out.data, grid.features.data)

    def test_ffn_zero_weights(self, make_grid, rng):
        grid = make_grid(rng, m=40, d=8, extent=6)
        params = init_otb_params(SMALL, rng)
        for name in ("ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"):
            params[name] = Tensor(np.zeros(params[name].shape))
        assert np.all(ffn(grid.features, params).data == 0.0)
        beta = rng.normal(size=8)
        plain = otb_apply(grid, params, SMALL).data
        params["ffn.bn.beta"] = Tensor(beta)
        np.testing.assert_allclose(otb_apply(grid, params, SMALL).data, plain + beta, atol=1e-13)

    def test_ffn_second_layer_zero(self, make_grid, rng):
        grid = make_grid(rng, m=40, d=8, extent=6)
        params = init_otb_params(SMALL, rng)
        params["ffn.w2"] = Tensor(np.zeros(params["ffn.w2"].shape))
        beta = rng.normal(size=8)
        plain = otb_apply(grid, params, SMALL).data
        params["ffn.bn.beta"] = Tensor(beta)
        np.testing.assert_allclose(otb_apply(grid, params, SMALL).data, plain + beta, atol=1e-13)

    def test_ffn_gradient(self, rng):
        params = init_otb_params(SMALL, rng)
        w = Tensor(rng.normal(size=(6, 8)))
        names = ("ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2")
        inputs = [Tensor(rng.normal(size=(6, 8)))] + [Tensor(rng.normal(size=params[n].shape)) for n in names]

        def f(x, w1, b1, w2, b2):
            return T.sum(T.mul(ffn(x, dict(zip(names, (w1, b1, w2, b2)))), w))

        assert grad_check(f, inputs).worst < 1e-5

    def test_height_one_is_plain_block(self, make_grid, rng):
        cfg = OTBConfig(d=8, heads=2, head_dim=4, height=1)
        grid = make_grid(rng, m=25, d=8, scenes=2)
        params = init_otb_params(cfg, rng)
        out = otb_apply(grid, params, cfg).data
        ref = dense_otb(grid.coords, grid.batch_ids, grid.features.data, numpy_params(params), 1, cfg.scale)
        assert np.abs(out - ref).max() < 1e-10

    @pytest.mark.parametrize("mode", [INFER, TRAIN])
    def test_output_shape(self, make_grid, rng, mode):
        grid = make_grid(rng, m=70, d=8, scenes=2, extent=12)
        out = otb_apply(grid, init_otb_params(SMALL, rng), SMALL, mode=mode, rng=rng)
        assert out.shape == (70, 8) and np.isfinite(out.data).all()

    def test_exhaustive_equals_dense_oracle(self, make_grid, rng):
        cfg = OTBConfig(d=8, heads=2, head_dim=4, height=3, k=None, keys=None)
        grid = make_grid(rng, m=90, d=8, scenes=2, extent=10)
        params = init_otb_params(cfg, rng)
        out = otb_apply(grid, params, cfg).data
        ref = dense_otb(grid.coords, grid.batch_ids, grid.features.data, numpy_params(params), 3, cfg.scale)
        assert np.abs(out - ref).max() < 1e-9

    def test_top_padding_invariance(self, make_grid, rng):
        grid = make_grid(rng, m=80, d=8, scenes=3, extent=10)
        params = init_otb_params(SMALL, rng)
        base = otb_apply(grid, params, SMALL).data
        padded = otb_apply(grid, params, OTBConfig(**{**SMALL.__dict__, "top_padding": 13})).data
        assert np.abs(base - padded).max() <= 1e-12

    def test_permutation_equivariance(self, make_grid, rng):
        grid = make_grid(rng, m=120, d=8, scenes=2, extent=12)
        params = init_otb_params(SMALL, rng)
        perm = rng.permutation(120)
        a = otb_apply(grid, params, SMALL).data
        b = otb_apply(grid.permuted(perm), params, SMALL).data
        assert np.abs(b - a[perm]).max() < 1e-10

    def test_selection_trace_invariants(self, make_grid, rng):
        grid = make_grid(rng, m=150, d=8, scenes=2, extent=14)
        pyr = build_pyramid(grid, SMALL.height)
        _, trace = octree_attention(pyr, init_otb_params(SMALL, rng), SMALL, mode=TRAIN, rng=rng)
        for lt in trace.levels:
            level = pyr.levels[lt.level]
            for q, row in enumerate(lt.selection):
                kept = row[row != EMPTY]
                assert len(set(kept)) == len(kept) >= 1
                assert np.all(level.batch_ids[kept] == level.batch_ids[q])
            if lt.key_index is not None:
                rows = lt.key_index
                ok = rows != EMPTY
                assert np.all(level.batch_ids[rows[ok]] == np.broadcast_to(level.batch_ids[:, None], rows.shape)[ok])
                sums = lt.scores.sum(axis=1)
                assert np.abs(sums - SMALL.heads).max() < 1e-11

    def test_mac_count_matches_closed_form(self, make_grid, rng):
        grid = make_grid(rng, m=300, d=8, scenes=2, extent=16)
        pyr = build_pyramid(grid, SMALL.height)
        with macs.count_macs() as counter:
            octree_attention(pyr, init_otb_params(SMALL, rng), SMALL)
        top = pyr.levels[-1]
        expected = macs.octattn_attention_macs(
            int(top.scene_counts().max()), [len(g) for g in pyr.levels[:-1]], SMALL.keys, 2, 4, batch=2
        )
        assert macs.attention_macs(counter) == expected

    def test_train_mode_is_seeded(self, make_grid, rng):
        grid = make_grid(rng, m=100, d=8, extent=12)
        params = init_otb_params(SMALL, rng)
        a = otb_apply(grid, params, SMALL, mode=TRAIN, rng=np.random.default_rng(5)).data
        b = otb_apply(grid, params, SMALL, mode=TRAIN, rng=np.random.default_rng(5)).data
        assert a.tobytes() == b.tobytes()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            OTBConfig(d=8, heads=3, head_dim=4)
        with pytest.raises(ValueError):
            OTBConfig(tau=0.0)
        assert OTBConfig().scale == pytest.approx(1 / 8)

