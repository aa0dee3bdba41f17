"""Sparse voxel grids and their padded dense-token view."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

EMPTY = -1
_KEY_BITS = 16
_KEY_LIMIT = 1 << _KEY_BITS


def pack_keys(batch_ids: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Pack (batch, ix, iy, iz) into one int64; coordinates must lie in [0, 2**16)."""
    c = np.asarray(coords, dtype=np.int64)
    b = np.asarray(batch_ids, dtype=np.int64)
    return (((b << _KEY_BITS) | c[:, 0]) << (2 * _KEY_BITS)) | (c[:, 1] << _KEY_BITS) | c[:, 2]


@dataclass(frozen=True, eq=False)
class SparseVoxelGrid:
    """Batch of non-empty voxels.

    Row order is free; the canonical order (batch id, x, y, z) drives the
    dense view and is what ``voxelize`` emits.  ``point_counts`` and ``dropped`` are
    voxelization bookkeeping and may be None for derived grids.
    """

    coords: np.ndarray
    batch_ids: np.ndarray
    features: Tensor
    voxel_size: np.ndarray
    range_min: np.ndarray
    range_max: np.ndarray
    num_scenes: int = 1
    point_counts: Optional[np.ndarray] = None
    dropped: int = 0
    _keys: np.ndarray = field(init=False, repr=False)
    _order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        batch_ids = np.asarray(self.batch_ids, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "batch_ids", batch_ids)
        for name in ("voxel_size", "range_min", "range_max"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        m = coords.shape[0]
        if batch_ids.shape[0] != m or self.features.shape[0] != m:
            raise ValueError(
                f"row count mismatch: coords {m}, batch_ids {batch_ids.shape[0]}, "
                f"features {self.features.shape[0]}"
            )
        if m and (coords.min() < 0 or coords.max() >= _KEY_LIMIT):
            raise ValueError("voxel coordinates must be non-negative and below 2**16")
        keys = pack_keys(batch_ids, coords)
        order = np.argsort(keys, kind="stable")
        if m > 1 and np.any(keys[order][1:] == keys[order][:-1]):
            raise ValueError("duplicate (batch_id, coord) pair in grid")
        object.__setattr__(self, "_keys", keys[order])
        object.__setattr__(self, "_order", order)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1] if self.features.ndim == 2 else 0

    def lookup(self, batch_ids: np.ndarray, coords: np.ndarray) -> np.ndarray:
        """Row index of every (batch, coord) query, EMPTY where absent or out of bounds."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        batch_ids = np.broadcast_to(np.asarray(batch_ids, dtype=np.int64), (coords.shape[0],))
        rows = np.full(coords.shape[0], EMPTY, dtype=np.int64)
        inside = np.all((coords >= 0) & (coords < _KEY_LIMIT), axis=1)
        if not len(self) or not inside.any():
            return rows
        keys = pack_keys(batch_ids[inside], coords[inside])
        pos = np.searchsorted(self._keys, keys)
        pos_c = np.minimum(pos, len(self) - 1)
        hit = self._keys[pos_c] == keys
        found = np.where(hit, self._order[pos_c], EMPTY)
        rows[inside] = found
        return rows

    def centers(self) -> np.ndarray:
        """Metric centre of every voxel."""
        return self.range_min + (self.coords + 0.5) * self.voxel_size

    def scene_counts(self) -> np.ndarray:
        return np.bincount(self.batch_ids, minlength=self.num_scenes)

    def with_features(self, features: Tensor) -> "SparseVoxelGrid":
        return SparseVoxelGrid(
            self.coords,
            self.batch_ids,
            features,
            self.voxel_size,
            self.range_min,
            self.range_max,
            num_scenes=self.num_scenes,
            point_counts=self.point_counts,
            dropped=self.dropped,
        )

    def permuted(self, perm: np.ndarray) -> "SparseVoxelGrid":
        """Same voxels with rows reordered so that new row i is old row perm[i]."""
        perm = np.asarray(perm)
        return SparseVoxelGrid(
            self.coords[perm],
            self.batch_ids[perm],
            T.gather(self.features, perm),
            self.voxel_size,
            self.range_min,
            self.range_max,
            num_scenes=self.num_scenes,
            point_counts=None if self.point_counts is None else self.point_counts[perm],
            dropped=self.dropped,
        )

    def canonical_order(self) -> np.ndarray:
        """Row permutation sorting voxels by (batch id, x, y, z)."""
        return self._order


def sorted_grid(grid: SparseVoxelGrid) -> SparseVoxelGrid:
    order = grid.canonical_order()
    if np.array_equal(order, np.arange(len(grid))):
        return grid
    return grid.permuted(order)


@dataclass(frozen=True, eq=False)
class DenseTokenBatch:
    """Padded B x m_max x d view of a grid; invalid slots hold zeros."""

    tokens: Tensor
    validity: np.ndarray
    row_map: np.ndarray

    @property
    def num_scenes(self) -> int:
        return self.validity.shape[0]

    @property
    def m_max(self) -> int:
        return self.validity.shape[1]


def dense_slots(grid: SparseVoxelGrid, pad_to: Optional[int] = None) -> np.ndarray:
    """B x m_max matrix of grid rows (EMPTY for padding), slots in canonical order."""
    counts = grid.scene_counts()
    m_max = int(counts.max()) if counts.size else 0
    if pad_to is not None:
        if pad_to < m_max:
            raise ValueError(f"pad_to={pad_to} is smaller than the largest scene ({m_max})")
        m_max = pad_to
    row_map = np.full((grid.num_scenes, m_max), EMPTY, dtype=np.int64)
    order = grid.canonical_order()
    b = grid.batch_ids[order]
    starts = np.r_[0, np.cumsum(counts)[:-1]]
    slot = np.arange(len(grid)) - starts[b]
    row_map[b, slot] = order
    return row_map


def to_dense_batch(grid: SparseVoxelGrid, pad_to: Optional[int] = None) -> DenseTokenBatch:
    row_map = dense_slots(grid, pad_to)
    return DenseTokenBatch(T.gather(grid.features, row_map), row_map != EMPTY, row_map)


def from_dense_batch(batch: DenseTokenBatch, num_rows: Optional[int] = None) -> Tensor:
    """Compact the valid slots back into grid-row order."""
    b, m = batch.validity.shape
    flat = batch.row_map.reshape(-1)
    valid = flat != EMPTY
    n = int(valid.sum()) if num_rows is None else num_rows
    src = np.full(n, EMPTY, dtype=np.int64)
    src[flat[valid]] = np.flatnonzero(valid)
    tokens = T.reshape(batch.tokens, (b * m,) + batch.tokens.shape[2:])
    return T.gather(tokens, src)
