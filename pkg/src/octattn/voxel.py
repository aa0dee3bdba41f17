"""Point-cloud ingestion, voxelization and patch embedding."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import tensor as T
from .grid import SparseVoxelGrid
from .sparse_conv import SubmConvParams, subm_conv
from .tensor import Tensor

logger = logging.getLogger(__name__)

RAW_FEATURES = 4
KITTI_VOXEL_SIZE = (0.05, 0.05, 0.125)
WOD_VOXEL_SIZE = (0.1, 0.1, 0.1875)


class PointFileError(ValueError):
    """Malformed or truncated point file."""


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # P x 4: x, y, z (metres), intensity
    scene_id: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.isfinite(pts[:, :3]).all():
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def load_points(path: Union[str, os.PathLike], format: str = "auto", scene_id: int = 0) -> PointCloud:
    """Read a CSV (``x,y,z[,intensity]``) or little-endian f32x4 binary file."""
    path = os.fspath(path)
    if format == "auto":
        format = "csv" if path.lower().endswith((".csv", ".txt")) else "bin_f32x4"
    if format == "bin_f32x4":
        size = os.path.getsize(path)
        if size % 16:
            raise PointFileError(f"{path}: {size} bytes is not a multiple of 16")
        raw = np.fromfile(path, dtype="<f4").reshape(-1, 4)
        return PointCloud(raw.astype(np.float64), scene_id)
    if format != "csv":
        raise ValueError(f"unknown point format {format!r}")

    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            row = [c.strip() for c in row]
            if not row or all(c == "" for c in row):
                continue
            if lineno == 1 and not _is_number(row[0]):
                continue
            if len(row) not in (3, 4):
                raise PointFileError(f"{path}:{lineno}: expected 3 or 4 columns, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise PointFileError(f"{path}:{lineno}: {exc}") from None
            if len(vals) == 3:
                vals.append(0.0)
            rows.append(vals)
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 4), scene_id)


def save_points(path: Union[str, os.PathLike], pc: PointCloud, format: str = "bin_f32x4") -> None:
    if format == "bin_f32x4":
        pc.points.astype("<f4").tofile(path)
    else:
        np.savetxt(path, pc.points, delimiter=",", header="x,y,z,intensity", comments="")


def voxelize(
    clouds: Union[PointCloud, Sequence[PointCloud]],
    voxel_size: Sequence[float] = KITTI_VOXEL_SIZE,
    range_min: Sequence[float] = (0.0, -40.0, -3.0),
    range_max: Sequence[float] = (70.4, 40.0, 1.0),
) -> SparseVoxelGrid:
    """Bin points into voxels; each voxel's raw feature is its mean point.

    Several clouds become one batched grid, scene i getting batch id i.
    Points outside [range_min, range_max) are dropped and counted.
    """
    if isinstance(clouds, PointCloud):
        clouds = [clouds]
    size = np.asarray(voxel_size, dtype=np.float64)
    lo = np.asarray(range_min, dtype=np.float64)
    hi = np.asarray(range_max, dtype=np.float64)
    if np.any(size <= 0):
        raise ValueError("voxel size components must be positive")
    if np.any(lo >= hi):
        raise ValueError("range_min must be below range_max on every axis")
    bounds = np.floor((hi - lo) / size).astype(np.int64) + 1

    all_coords, all_batch, all_sum, all_count = [], [], [], []
    dropped = 0
    for b, pc in enumerate(clouds):
        pts = pc.points
        keep = np.all((pts[:, :3] >= lo) & (pts[:, :3] < hi), axis=1)
        dropped += int((~keep).sum())
        pts = pts[keep]
        coords = np.floor((pts[:, :3] - lo) / size).astype(np.int64)
        coords = np.minimum(coords, bounds - 1)
        uniq, inverse, counts = np.unique(coords, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        sums = np.zeros((uniq.shape[0], RAW_FEATURES))
        np.add.at(sums, inverse, pts)
        all_coords.append(uniq)
        all_batch.append(np.full(uniq.shape[0], b, dtype=np.int64))
        all_sum.append(sums)
        all_count.append(counts)
    if dropped:
        logger.debug("voxelize dropped %d out-of-range points", dropped)
    counts = np.concatenate(all_count) if all_count else np.zeros(0, dtype=np.int64)
    feats = np.concatenate(all_sum) / np.maximum(counts, 1)[:, None] if all_sum else np.zeros((0, 4))
    return SparseVoxelGrid(
        np.concatenate(all_coords) if all_coords else np.zeros((0, 3), dtype=np.int64),
        np.concatenate(all_batch) if all_batch else np.zeros(0, dtype=np.int64),
        Tensor(feats.reshape(-1, RAW_FEATURES)),
        size,
        lo,
        hi,
        num_scenes=len(clouds),
        point_counts=counts,
        dropped=dropped,
    )


def init_embed_params(d: int, rng: np.random.Generator, requires_grad: bool = False) -> dict:
    conv = SubmConvParams.init(RAW_FEATURES, RAW_FEATURES, rng, requires_grad)
    return {
        "embed.conv.kernel": conv.kernel,
        "embed.conv.bias": conv.bias,
        "embed.weight": Tensor(rng.normal(0, 1 / np.sqrt(RAW_FEATURES), (RAW_FEATURES, d)), requires_grad),
        "embed.bias": Tensor(np.zeros(d), requires_grad),
    }


def embed(grid: SparseVoxelGrid, params: dict) -> SparseVoxelGrid:
    """Raw 4-d voxel features -> d-d tokens: one submanifold conv, linear, ReLU."""
    conv = SubmConvParams(params["embed.conv.kernel"], params["embed.conv.bias"])
    if grid.num_features != RAW_FEATURES and len(grid):
        raise T.DimensionError(f"embed expects raw {RAW_FEATURES}-d features, got {grid.num_features}")
    d = params["embed.weight"].shape[1]
    if len(grid) == 0:
        return grid.with_features(Tensor(np.zeros((0, d))))
    h = subm_conv(grid, conv)
    return grid.with_features(T.relu(T.linear(h, params["embed.weight"], params["embed.bias"])))
