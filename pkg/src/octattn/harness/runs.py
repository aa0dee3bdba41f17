"""The work behind each CLI subcommand, returning plain JSON-ready dicts."""

from __future__ import annotations

import hashlib
import logging
import time
from typing import Optional, Sequence

import numpy as np

from .. import tensor as T
from ..attention import INFER, init_otb_params, otb_apply
from ..backbone import backbone_forward, init_backbone_params
from ..grid import SparseVoxelGrid
from ..oracle import dense_otb
from ..semantic import focal_loss, init_seg_params, label_voxels, seg_branch
from ..sparse_conv import neighbor_table
from ..voxel import PointCloud, embed, init_embed_params, voxelize
from .bench import run_bench
from .config import RunConfig
from .synth import scene_with_voxels, synth_scene

logger = logging.getLogger(__name__)

ORACLE_LIMIT = 512
ORACLE_TOL = 1e-9


class OracleRefusal(ValueError):
    pass


def checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


def run_forward(cfg: RunConfig, clouds: Sequence[PointCloud]) -> dict:
    rng = np.random.default_rng(cfg.seed)
    otb_cfgs = [cfg.otb(i) for i in range(len(cfg.heights))]
    params = init_backbone_params(otb_cfgs, rng)
    t0 = time.perf_counter()
    raw = voxelize(list(clouds), cfg.voxel_size, cfg.range_min, cfg.range_max)
    if len(raw) == 0:
        raise ValueError("no points inside the configured range")
    res = backbone_forward(raw, params, otb_cfgs, cfg.mode, np.random.default_rng(cfg.seed + 1))
    elapsed = time.perf_counter() - t0
    out = res.output.features.data
    return {
        "checksum": checksum(out),
        "output_sum": float(out.sum()),
        "output_shape": list(out.shape),
        "input_voxels": len(raw),
        "dropped_points": raw.dropped,
        "seg_shape": list(res.seg_scores.shape),
        "level_counts": res.level_counts,
        "omega": res.down_ratios,
        "seconds": elapsed,
    }


def oracle_scene(seed: int, cfg: RunConfig, target: Optional[int] = None):
    """Seeded small scene (one or two sub-scenes) for the dense comparison."""
    rng = np.random.default_rng(seed)
    scenes = 1 + seed % 2
    target = target or int(rng.integers(96, 480 // scenes))
    clouds, lo, hi = [], None, None
    for s in range(scenes):
        pc, lo_s, hi_s = scene_with_voxels(target, cfg.voxel_size, seed=1000 * seed + s, fill=0.6)
        clouds.append(PointCloud(pc.points, s))
        lo = lo_s if lo is None else np.minimum(lo, lo_s)
        hi = hi_s if hi is None else np.maximum(hi, hi_s)
    return voxelize(clouds, cfg.voxel_size, lo, hi)


def oracle_check(grid: SparseVoxelGrid, cfg: RunConfig, seed: int, semantic: bool = True) -> dict:
    if len(grid) > ORACLE_LIMIT:
        raise OracleRefusal(f"oracle comparison is limited to {ORACLE_LIMIT} voxels, scene has {len(grid)}")
    rng = np.random.default_rng(seed)
    otb_cfg = cfg.otb(0, k=None, keys=None)
    feats = embed(grid, init_embed_params(cfg.d, rng))
    params = init_otb_params(otb_cfg, rng)
    scores = rng.uniform(0.0, 1.0, len(grid)) if semantic else None
    got, levels = otb_apply(
        feats, params, otb_cfg, None if scores is None else T.Tensor(scores), INFER, return_levels=True
    )
    ref, ref_levels = dense_otb(
        grid.coords,
        grid.batch_ids,
        feats.features.data,
        {k: v.data for k, v in params.items()},
        otb_cfg.height,
        otb_cfg.scale,
        otb_cfg.bn_eps,
        centers=grid.centers(),
        seg_scores=scores,
        sam=(cfg.delta_q, cfg.delta_k, cfg.gamma),
        return_levels=True,
    )
    per_level = [float(np.abs(a.data - b).max()) for a, b in zip(levels, ref_levels)]
    dev = float(np.abs(got.data - ref).max())
    return {
        "seed": seed,
        "voxels": len(grid),
        "scenes": grid.num_scenes,
        "max_abs_dev_per_level": per_level,
        "max_abs_dev_output": dev,
        "passed": bool(max(per_level + [dev]) <= ORACLE_TOL),
    }


def run_oracle(cfg: RunConfig, seeds: Sequence[int], clouds: Optional[Sequence[PointCloud]] = None) -> dict:
    t0 = time.perf_counter()
    results = []
    if clouds:
        grid = voxelize(list(clouds), cfg.voxel_size, cfg.range_min, cfg.range_max)
        results.append(oracle_check(grid, cfg, cfg.seed))
    else:
        for s in seeds:
            results.append(oracle_check(oracle_scene(s, cfg), cfg, s))
    return {
        "tolerance": ORACLE_TOL,
        "scenes": results,
        "passed": all(r["passed"] for r in results),
        "seconds": time.perf_counter() - t0,
    }


def run_bench_report(cfg: RunConfig, sizes: Sequence[int], execute_dense: bool = True) -> dict:
    t0 = time.perf_counter()
    report = run_bench(sizes, cfg.otb(0), cfg.voxel_size, cfg.seed, cfg.mode, execute_dense)
    out = report.to_dict()
    out["seconds"] = time.perf_counter() - t0
    return out


def two_box_scene(seed: int, cfg: RunConfig):
    """Small seeded scene with two objects on sparse background, plus its boxes."""
    lo = np.array([0.0, 0.0, 0.0])
    hi = np.array([6.0, 6.0, 2.0])
    pc, boxes = synth_scene(seed, 2, 600, 1500, lo, hi)
    return pc, boxes, lo, hi


def train_segmentation(
    grid: SparseVoxelGrid, labels: np.ndarray, params: dict, steps: int, lr: float
) -> list:
    """Plain gradient descent on the seg-branch parameters; returns the loss per step.

    ``params`` is updated in place with fresh leaf tensors after every step.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    names = [k for k in params if k.startswith("seg.")]
    nbr = neighbor_table(grid)
    losses = []
    for _ in range(steps):
        leaves = {k: T.Tensor(params[k].data, requires_grad=True) for k in names}
        loss = focal_loss(seg_branch(grid, leaves, nbr), labels)
        loss.backward()
        losses.append(float(loss.item()))
        for k in names:
            params[k] = T.Tensor(leaves[k].data - lr * leaves[k].grad)
    return losses


def run_trainseg(cfg: RunConfig, steps: int, lr: float = 0.5, scene=None) -> dict:
    rng = np.random.default_rng(cfg.seed)
    if scene is None:
        pc, boxes, lo, hi = two_box_scene(cfg.seed, cfg)
    else:
        pc, boxes, lo, hi = scene
    raw = voxelize(pc, cfg.voxel_size, lo, hi)
    grid = embed(raw, init_embed_params(cfg.d, rng))
    grid = grid.with_features(T.Tensor(grid.features.data))
    labels = label_voxels(grid, boxes)
    params = init_seg_params(cfg.d, rng)
    losses = train_segmentation(grid, labels, params, steps, lr)
    final = float(focal_loss(seg_branch(grid, params), labels).item())
    return {
        "voxels": len(grid),
        "foreground_voxels": int(labels.sum()),
        "steps": steps,
        "lr": lr,
        "losses": losses,
        "initial_loss": losses[0],
        "final_loss": final,
        "reduction": 1.0 - final / losses[0],
    }
