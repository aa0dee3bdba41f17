"""Seeded synthetic scenes: Gaussian object clusters in boxes over uniform background."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from ..voxel import PointCloud, voxelize

logger = logging.getLogger(__name__)


def synth_scene(
    seed: int,
    n_objects: int,
    points_per_object: int,
    background_points: int,
    range_min: Sequence[float],
    range_max: Sequence[float],
    scene_id: int = 0,
):
    """Return ``(PointCloud, boxes)``; boxes are rows ``scene_id, min xyz, max xyz``."""
    if min(n_objects, points_per_object, background_points) < 0:
        raise ValueError("counts must be non-negative")
    rng = np.random.default_rng(seed)
    lo = np.asarray(range_min, dtype=np.float64)
    hi = np.asarray(range_max, dtype=np.float64)
    extent = hi - lo

    boxes = []
    clusters = []
    for _ in range(n_objects):
        size = np.minimum(rng.uniform([1.0, 0.8, 0.8], [4.0, 2.0, 1.8]), 0.5 * extent)
        bmin = lo + rng.uniform(0.0, 1.0, 3) * (extent - size)
        bmax = bmin + size
        pts = rng.normal(bmin + size / 2, size / 4, (points_per_object, 3))
        pts = np.clip(pts, bmin, np.nextafter(bmax, -np.inf))
        clusters.append(np.column_stack([pts, rng.uniform(0.3, 1.0, points_per_object)]))
        boxes.append(np.r_[scene_id, bmin, bmax])
    bg = lo + rng.uniform(0.0, 1.0, (background_points, 3)) * extent
    bg = np.minimum(bg, np.nextafter(hi, -np.inf))
    clusters.append(np.column_stack([bg, rng.uniform(0.0, 0.3, background_points)]))
    points = np.concatenate(clusters) if clusters else np.zeros((0, 4))
    return PointCloud(points, scene_id), np.array(boxes, dtype=np.float64).reshape(-1, 7)


def surface_range(target_voxels: int, voxel_size: Sequence[float], fill: float = 0.8):
    """A one-voxel-thick square slab holding about ``target_voxels / fill`` cells.

    Lidar returns lie on surfaces, so non-empty voxels form 2-D sheets; a
    thin slab reproduces that sparsity pattern.
    """
    vs = np.asarray(voxel_size, dtype=np.float64)
    side = int(np.ceil(np.sqrt(target_voxels / fill)))
    return np.zeros(3), np.array([side * vs[0], side * vs[1], vs[2]])


def scene_with_voxels(
    target: int,
    voxel_size: Sequence[float],
    seed: int = 0,
    tolerance: float = 0.05,
    max_tries: int = 50,
    fill: float = 0.8,
):
    """Uniform slab scene whose non-empty voxel count is within ``tolerance`` of ``target``.

    Retries with an adjusted point count until the count lands in range.
    Returns ``(PointCloud, range_min, range_max)``.
    """
    lo, hi = surface_range(target, voxel_size, fill)
    cells = int(np.prod(np.round((hi - lo) / np.asarray(voxel_size))))
    frac = min(target / cells, 0.999)
    points = max(1, int(round(-cells * np.log1p(-frac))))
    for attempt in range(max_tries):
        pc, _ = synth_scene(seed + 7919 * attempt, 0, 0, points, lo, hi)
        got = len(voxelize(pc, voxel_size, lo, hi))
        if abs(got - target) <= tolerance * target:
            return pc, lo, hi
        points = max(1, int(round(points * target / max(got, 1))))
        logger.debug("scene_with_voxels: target %d got %d, retrying with %d points", target, got, points)
    raise RuntimeError(f"could not reach {target} voxels within {tolerance:.0%} after {max_tries} tries")
