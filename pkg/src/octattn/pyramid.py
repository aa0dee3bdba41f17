"""Multi-scale max-scatter feature pyramid with parent/child index banks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .grid import EMPTY, SparseVoxelGrid, pack_keys
from .tensor import Tensor

FANOUT = 8


@dataclass(frozen=True, eq=False)
class IndexBank:
    """Row mappings between a child level and the next coarser (parent) level."""

    child_to_parent: np.ndarray
    children: np.ndarray  # m_parent x 8 child rows in canonical order, EMPTY padded

    @property
    def parent_to_children(self) -> list:
        return [row[row != EMPTY] for row in self.children]

    @property
    def num_children(self) -> np.ndarray:
        return (self.children != EMPTY).sum(axis=1)


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    levels: list  # SparseVoxelGrid per level, level 0 finest, features post-BN
    pooled: list  # pre-BN max-scatter features per level
    banks: list  # banks[n] links level n (children) to level n + 1 (parents)
    ancestors: list  # ancestors[n][r] = level-n row holding level-0 row r
    base: SparseVoxelGrid = field(repr=False)

    @property
    def height(self) -> int:
        return len(self.levels)

    def counts(self) -> list:
        return [len(g) for g in self.levels]

    def scene_counts(self) -> np.ndarray:
        """num_levels x num_scenes matrix of non-empty voxel counts."""
        return np.stack([g.scene_counts() for g in self.levels])

    @property
    def down_ratio_observed(self) -> float:
        """Geometric-mean ratio m_n / m_{n+1} over the pyramid (1.0 for a single level)."""
        m = self.counts()
        if len(m) < 2:
            return 1.0
        return float((m[0] / m[-1]) ** (1.0 / (len(m) - 1)))

    def level_ratios(self) -> list:
        m = self.counts()
        return [m[n] / m[n + 1] for n in range(len(m) - 1)]


def _coarsen(batch_ids: np.ndarray, coords: np.ndarray):
    """Parent coords (floor halving), deduplicated, with the child -> parent map."""
    parent_coords = coords // 2
    keys = pack_keys(batch_ids, parent_coords)
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    return batch_ids[first], parent_coords[first], inverse.reshape(-1)


def _children_table(child_to_parent: np.ndarray, num_parents: int, rank: np.ndarray) -> np.ndarray:
    # children ordered by canonical rank, not row index, so row permutations do not change it
    order = np.lexsort((rank, child_to_parent))
    parents = child_to_parent[order]
    starts = np.searchsorted(parents, np.arange(num_parents))
    slot = np.arange(order.size) - starts[parents]
    if slot.size and slot.max() >= FANOUT:
        raise AssertionError("octree fan-out exceeded 8; coordinates are inconsistent")
    table = np.full((num_parents, FANOUT), EMPTY, dtype=np.int64)
    table[parents, slot] = order
    return table


def build_pyramid(
    grid: SparseVoxelGrid,
    height: int,
    bn_params: Optional[dict] = None,
    eps: float = 1e-5,
) -> FeaturePyramid:
    """Level n: coords floor(I0 / 2**n), features BN(max over member level-0 rows).

    ``bn_params`` maps ``"pyramid.{n}.gamma"`` / ``"pyramid.{n}.beta"`` to tensors;
    missing entries default to the identity affine transform.
    """
    if height < 1:
        raise ValueError("pyramid height must be >= 1")
    if len(grid) and grid.coords.min() < 0:
        raise AssertionError("negative voxel coordinates reached the pyramid")
    if len(grid) == 0:
        raise ValueError("cannot build a pyramid on an empty grid")
    bn_params = bn_params or {}
    d = grid.num_features

    level_coords = [grid.coords]
    level_batch = [grid.batch_ids]
    banks = []
    ancestors = [np.arange(len(grid))]
    rank = np.empty(len(grid), dtype=np.int64)
    rank[grid.canonical_order()] = np.arange(len(grid))
    for _ in range(1, height):
        b, c, c2p = _coarsen(level_batch[-1], level_coords[-1])
        banks.append(IndexBank(c2p, _children_table(c2p, c.shape[0], rank)))
        rank = np.arange(c.shape[0])
        ancestors.append(c2p[ancestors[-1]])
        level_coords.append(c)
        level_batch.append(b)

    levels, pooled = [], []
    for n in range(height):
        m_n = level_coords[n].shape[0]
        if n == 0:
            pool = grid.features
        else:
            pool, _ = T.segment_max(grid.features, ancestors[n], m_n)
        gamma = bn_params.get(f"pyramid.{n}.gamma", Tensor(np.ones(d)))
        beta = bn_params.get(f"pyramid.{n}.beta", Tensor(np.zeros(d)))
        feats = T.batch_norm(pool, gamma, beta, eps)
        levels.append(
            SparseVoxelGrid(
                level_coords[n],
                level_batch[n],
                feats,
                grid.voxel_size * (2**n),
                grid.range_min,
                grid.range_max,
                num_scenes=grid.num_scenes,
            )
        )
        pooled.append(pool)
    return FeaturePyramid(levels, pooled, banks, ancestors, grid)


def upsample(feats: Tensor, pyramid: FeaturePyramid, level: int) -> Tensor:
    """Copy every level-``level`` row to all of its level-0 descendants."""
    if level == 0:
        return feats
    return T.gather(feats, pyramid.ancestors[level])


def level_stats(pyramid: FeaturePyramid, level: int, scores: Optional[Tensor] = None):
    """Mean member centre (metres) and mean member score of every level-n voxel.

    Returns ``(centers, scores)``; ``scores`` is None when no level-0 scores are given.
    """
    m_n = len(pyramid.levels[level])
    seg = pyramid.ancestors[level]
    centers = T.segment_mean(Tensor(pyramid.base.centers()), seg, m_n).data
    mean_scores = None
    if scores is not None:
        s = T.reshape(scores, (-1, 1))
        mean_scores = T.reshape(T.segment_mean(s, seg, m_n), (-1,))
    return centers, mean_scores
