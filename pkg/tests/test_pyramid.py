import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octattn import tensor as T
from octattn.grid import EMPTY, SparseVoxelGrid
from octattn.harness.synth import scene_with_voxels
from octattn.pyramid import FANOUT, build_pyramid, level_stats, upsample
from octattn.tensor import Tensor, grad_check
from octattn.voxel import KITTI_VOXEL_SIZE, voxelize

from conftest import random_grid


def grid_of(coords, feats, batch=None):
    batch = np.zeros(len(coords), dtype=int) if batch is None else np.asarray(batch)
    return SparseVoxelGrid(
        np.asarray(coords), batch, Tensor(np.asarray(feats, dtype=float)), (1, 1, 1), (0, 0, 0), (100,) * 3,
        int(batch.max()) + 1,
    )


def test_coordinates_halve_with_floor():
    pyr = build_pyramid(grid_of([[5, 3, 7]], [[1.0]]), 3)
    assert [lvl.coords.tolist() for lvl in pyr.levels] == [[[5, 3, 7]], [[2, 1, 3]], [[1, 0, 1]]]


def test_max_scatter_example():
    pyr = build_pyramid(grid_of([[0, 0, 0], [1, 0, 0]], [[1, 5], [3, 2]]), 2)
    assert pyr.pooled[1].data.tolist() == [[3.0, 5.0]]


def test_level0_is_batch_normalized_input(make_grid, rng):
    grid = make_grid(rng, m=30, d=4)
    pyr = build_pyramid(grid, 2)
    x = grid.features.data
    ref = (x - x.mean(0)) / np.sqrt(x.var(0) + 1e-5)
    np.testing.assert_allclose(pyr.levels[0].features.data, ref, atol=1e-12)


def test_bn_params_are_used(make_grid, rng):
    grid = make_grid(rng, m=30, d=4)
    params = {"pyramid.1.gamma": Tensor(np.full(4, 2.0)), "pyramid.1.beta": Tensor(np.full(4, 3.0))}
    plain = build_pyramid(grid, 2)
    tuned = build_pyramid(grid, 2, params)
    np.testing.assert_allclose(tuned.levels[1].features.data, 2 * plain.levels[1].features.data + 3, atol=1e-12)


def test_height_one_and_invalid():
    g = grid_of([[1, 1, 1], [2, 2, 2]], [[1.0], [2.0]])
    assert build_pyramid(g, 1).height == 1
    with pytest.raises(ValueError):
        build_pyramid(g, 0)


def test_thousand_voxel_scene_counts():
    pc, lo, hi = scene_with_voxels(1000, KITTI_VOXEL_SIZE, seed=3)
    grid = voxelize(pc, KITTI_VOXEL_SIZE, lo, hi)
    rng = np.random.default_rng(0)
    grid = grid.with_features(Tensor(rng.normal(size=(len(grid), 64))))
    pyr = build_pyramid(grid, 4)
    for n in range(4):
        dedup = {tuple(c) for c in (grid.coords >> n).tolist()}
        assert len(pyr.levels[n]) == len(dedup)
        assert pyr.levels[n].features.shape == (len(dedup), 64)
        assert {tuple(c) for c in pyr.levels[n].coords.tolist()} == dedup
    counts = pyr.counts()
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert pyr.down_ratio_observed > 1.0


def test_bank_consistency(make_grid, rng):
    pyr = build_pyramid(make_grid(rng, m=200, d=2, scenes=3, extent=12), 4)
    for n, bank in enumerate(pyr.banks):
        children = pyr.levels[n]
        parents = pyr.levels[n + 1]
        np.testing.assert_array_equal(parents.coords[bank.child_to_parent], children.coords // 2)
        np.testing.assert_array_equal(parents.batch_ids[bank.child_to_parent], children.batch_ids)
        assert bank.num_children.sum() == len(children)
        assert bank.num_children.min() >= 1 and bank.num_children.max() <= FANOUT
        for p, kids in enumerate(bank.parent_to_children):
            assert np.all(bank.child_to_parent[kids] == p)


def test_upsample_identity_and_broadcast():
    pyr = build_pyramid(grid_of([[2, 0, 2], [3, 1, 3], [0, 0, 0]], [[1.0], [2.0], [3.0]]), 2)
    f0 = Tensor(np.arange(3.0)[:, None])
    assert upsample(f0, pyr, 0) is f0
    parent = pyr.levels[1].lookup(np.array([0]), np.array([[1, 0, 1]]))[0]
    f1 = np.zeros((2, 1))
    f1[parent] = 7.0
    up = upsample(Tensor(f1), pyr, 1).data.ravel()
    assert up[0] == up[1] == 7.0 and up[2] == 0.0


def test_upsample_gradient_counts_descendants(make_grid, rng):
    pyr = build_pyramid(make_grid(rng, m=80, d=2, extent=8), 3)
    for n in (1, 2):
        leaf = Tensor(rng.normal(size=(len(pyr.levels[n]), 2)), requires_grad=True)
        T.sum(upsample(leaf, pyr, n)).backward()
        counts = np.bincount(pyr.ancestors[n], minlength=len(pyr.levels[n]))
        np.testing.assert_array_equal(leaf.grad, np.repeat(counts[:, None], 2, axis=1))
        rep = grad_check(lambda f: T.sum(upsample(f, pyr, n)), [Tensor(leaf.data)])
        assert rep.worst < 1e-8


def test_pyramid_gradient(make_grid, rng):
    grid = make_grid(rng, m=30, d=3, extent=5)
    w = Tensor(rng.normal(size=(len(build_pyramid(grid, 2).levels[1]), 3)))
    rep = grad_check(lambda x: T.sum(T.mul(build_pyramid(grid.with_features(x), 2).levels[1].features, w)),
                     [grid.features])
    assert rep.worst < 1e-5


def test_level_stats_examples():
    coords = [[0, 0, 0], [1, 0, 0], [4, 4, 4]]
    pyr = build_pyramid(grid_of(coords, np.zeros((3, 1))), 2)
    scores = Tensor([0.2, 0.6, 0.9])
    centers, s = level_stats(pyr, 1, scores)
    base = pyr.base.centers()
    pair = pyr.levels[1].lookup(np.array([0]), np.array([[0, 0, 0]]))[0]
    single = 1 - pair
    np.testing.assert_allclose(centers[pair], (base[0] + base[1]) / 2)
    np.testing.assert_allclose(centers[single], base[2])
    assert s.data[pair] == pytest.approx(0.4) and s.data[single] == pytest.approx(0.9)


def test_level_stats_against_grouping(make_grid, rng):
    grid = make_grid(rng, m=150, d=1, scenes=2, extent=10)
    pyr = build_pyramid(grid, 3)
    scores = rng.random(150)
    base = grid.centers()
    for n in range(3):
        centers, s = level_stats(pyr, n, Tensor(scores))
        for r, (b, c) in enumerate(zip(pyr.levels[n].batch_ids, pyr.levels[n].coords)):
            members = (grid.batch_ids == b) & np.all(grid.coords >> n == c, axis=1)
            assert np.abs(centers[r] - base[members].mean(0)).max() < 1e-12
            assert abs(s.data[r] - scores[members].mean()) < 1e-12
    assert level_stats(pyr, 1)[1] is None


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 5))
def test_structural_properties(seed, height):
    rng = np.random.default_rng(seed)
    grid = random_grid(rng, m=int(rng.integers(1, 120)), d=3, scenes=int(rng.integers(1, 4)), extent=16)
    pyr = build_pyramid(grid, height)
    for n in range(1, height):
        # dominance: pooled parent >= every member, channelwise
        assert np.all(pyr.pooled[n].data[pyr.ancestors[n]] >= grid.features.data)
        bank = pyr.banks[n - 1]
        rows = np.arange(len(pyr.levels[n - 1]))
        assert all(r in bank.parent_to_children[bank.child_to_parent[r]] for r in rows)
        assert bank.num_children.max() <= FANOUT
    sc = pyr.scene_counts()
    present = sc[0] > 0
    assert np.all(sc[:, present] >= 1) and np.all(np.diff(sc, axis=0) <= 0)


def test_constant_features_stay_constant(make_grid, rng):
    grid = make_grid(rng, m=60, d=3, extent=9)
    const = grid.with_features(Tensor(np.tile([1.5, -2.0, 0.25], (60, 1))))
    pyr = build_pyramid(const, 4)
    for n in range(4):
        assert np.all(pyr.pooled[n].data == [1.5, -2.0, 0.25])
        assert np.all(upsample(pyr.pooled[n], pyr, n).data == [1.5, -2.0, 0.25])


def test_negative_coords_rejected():
    # grids forbid negative coordinates outright; the pyramid relies on it
    with pytest.raises(ValueError):
        grid_of([[-1, 0, 0]], [[1.0]])
