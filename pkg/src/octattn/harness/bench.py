"""Attention MAC benchmark: dense self-attention versus octree attention."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .. import macs
from ..attention import INFER, OTBConfig, init_otb_params, octree_attention, subparams
from ..pyramid import build_pyramid
from ..voxel import embed, init_embed_params, voxelize
from .synth import scene_with_voxels

logger = logging.getLogger(__name__)


def dense_self_attention(x: np.ndarray, params: dict, cfg: OTBConfig, chunk: int = 512, execute: bool = True):
    """Full MHSA over all m tokens of one scene, evaluated in query-row blocks.

    MACs are recorded per block exactly as executed.  With ``execute=False``
    only the bookkeeping runs (same block loop, no arithmetic) and None is returned.
    """
    m, d = x.shape
    h, hd = cfg.heads, cfg.head_dim
    macs.record(macs.PROJECTION, h * m * d * hd * 4)
    out = np.zeros((m, d)) if execute else None
    if execute:
        wq, wk, wv, wh = (params[k].data for k in ("wq", "wk", "wv", "wh"))
        q = np.einsum("md,hde->hme", x, wq)
        k = np.einsum("md,hde->hme", x, wk)
        v = np.einsum("md,hde->hme", x, wv)
    for lo in range(0, m, chunk):
        hi = min(m, lo + chunk)
        if execute:
            logits = np.matmul(q[:, lo:hi], np.swapaxes(k, 1, 2)) * cfg.scale
            logits -= logits.max(axis=-1, keepdims=True)
            np.exp(logits, out=logits)
            logits /= logits.sum(axis=-1, keepdims=True)
            ctx = np.matmul(logits, v)
            out[lo:hi] = np.einsum("hre,hed->rd", ctx, wh)
        macs.record(macs.SCORE, h * (hi - lo) * m * hd)
        macs.record(macs.VALUE, h * (hi - lo) * m * hd)
    return out


def loglog_slope(sizes: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of ln(values) against ln(sizes)."""
    slope, _ = np.polyfit(np.log(np.asarray(sizes, float)), np.log(np.asarray(values, float)), 1)
    return float(slope)


@dataclass
class BenchRow:
    target: int
    voxels: int
    dense_macs: int
    dense_score_macs: int
    octattn_macs: int
    predicted_macs: int
    octattn_projection_macs: int
    dense_projection_macs: int
    level_counts: list
    omega: list
    dense_seconds: float
    octattn_seconds: float


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    dense_slope: float = float("nan")
    octattn_slope: float = float("nan")

    @property
    def exact(self) -> bool:
        return all(r.octattn_macs == r.predicted_macs for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "dense_slope": self.dense_slope,
            "octattn_slope": self.octattn_slope,
            "measured_equals_predicted": self.exact,
        }


def bench_one(
    target: int,
    cfg: OTBConfig,
    voxel_size: Sequence[float],
    seed: int = 0,
    mode: str = INFER,
    execute_dense: bool = True,
) -> BenchRow:
    pc, lo, hi = scene_with_voxels(target, voxel_size, seed=seed)
    rng = np.random.default_rng(seed)
    raw = voxelize(pc, voxel_size, lo, hi)
    grid = embed(raw, init_embed_params(cfg.d, rng))
    params = init_otb_params(cfg, rng)
    m = len(grid)

    t0 = time.perf_counter()
    with macs.count_macs() as dense:
        dense_self_attention(grid.features.data, subparams(params, f"level{cfg.height - 1}."), cfg, execute=execute_dense)
    t1 = time.perf_counter()
    with macs.count_macs() as octc:
        pyramid = build_pyramid(grid, cfg.height, params, cfg.bn_eps)
        octree_attention(pyramid, params, cfg, mode=mode, rng=np.random.default_rng(seed))
    t2 = time.perf_counter()

    counts = pyramid.counts()
    top = int(pyramid.levels[-1].scene_counts().max())
    predicted = macs.octattn_attention_macs(top, counts[:-1], cfg.keys, cfg.heads, cfg.head_dim)
    row = BenchRow(
        target=target,
        voxels=m,
        dense_macs=macs.attention_macs(dense),
        dense_score_macs=dense[macs.SCORE],
        octattn_macs=macs.attention_macs(octc),
        predicted_macs=predicted,
        octattn_projection_macs=octc[macs.PROJECTION],
        dense_projection_macs=dense[macs.PROJECTION],
        level_counts=counts,
        omega=pyramid.level_ratios(),
        dense_seconds=t1 - t0,
        octattn_seconds=t2 - t1,
    )
    logger.info(
        "bench M=%d dense=%d octattn=%d (%.1fs / %.1fs)",
        m, row.dense_macs, row.octattn_macs, row.dense_seconds, row.octattn_seconds,
    )
    return row


def run_bench(
    sizes: Sequence[int],
    cfg: OTBConfig,
    voxel_size: Sequence[float],
    seed: int = 0,
    mode: str = INFER,
    execute_dense: bool = True,
) -> BenchReport:
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise ValueError("benchmark sizes must be ascending")
    if cfg.keys is None:
        raise ValueError("the benchmark needs a fixed K")
    report = BenchReport()
    for i, target in enumerate(sizes):
        report.rows.append(bench_one(target, cfg, voxel_size, seed + i, mode, execute_dense))
    if len(report.rows) >= 2:
        vox = [r.voxels for r in report.rows]
        report.dense_slope = loglog_slope(vox, [r.dense_macs for r in report.rows])
        report.octattn_slope = loglog_slope(vox, [r.octattn_macs for r in report.rows])
    return report
