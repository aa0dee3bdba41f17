"""Two-layer octree transformer backbone: embed, segment, OTB, 2x pool, OTB."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import INFER, OTBConfig, subparams, init_otb_params, otb_forward
from .grid import SparseVoxelGrid, pack_keys
from .pyramid import build_pyramid
from .semantic import init_seg_params, seg_branch
from .voxel import embed, init_embed_params


def max_pool2x(grid: SparseVoxelGrid, scores: Optional[T.Tensor] = None):
    """Halve coordinates, max-pool features and mean-pool scores per coarse voxel."""
    coarse = grid.coords // 2
    keys = pack_keys(grid.batch_ids, coarse)
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    m = first.size
    feats, _ = T.segment_max(grid.features, inverse, m)
    pooled = SparseVoxelGrid(
        coarse[first],
        grid.batch_ids[first],
        feats,
        grid.voxel_size * 2,
        grid.range_min,
        grid.range_max,
        num_scenes=grid.num_scenes,
    )
    if scores is not None:
        scores = T.reshape(T.segment_mean(T.reshape(scores, (-1, 1)), inverse, m), (-1,))
    return pooled, scores


def init_backbone_params(cfgs: Sequence[OTBConfig], rng: np.random.Generator, requires_grad: bool = False) -> dict:
    d = cfgs[0].d
    params = init_embed_params(d, rng, requires_grad)
    params.update(init_seg_params(d, rng, requires_grad))
    for i, cfg in enumerate(cfgs):
        params.update(init_otb_params(cfg, rng, prefix=f"otb{i}.", requires_grad=requires_grad))
    return params


@dataclass
class BackboneResult:
    output: SparseVoxelGrid
    seg_scores: T.Tensor
    level_counts: list = field(default_factory=list)  # per layer, m_n per level
    down_ratios: list = field(default_factory=list)  # per layer, observed omega


def backbone_forward(
    raw: SparseVoxelGrid,
    params: dict,
    cfgs: Sequence[OTBConfig],
    mode: str = INFER,
    rng: Optional[np.random.Generator] = None,
    semantic: bool = True,
) -> BackboneResult:
    grid = embed(raw, params)
    scores = seg_branch(grid, params)
    result = BackboneResult(grid, scores)
    layer_scores = scores if semantic else None
    for i, cfg in enumerate(cfgs):
        if i:
            grid, layer_scores = max_pool2x(grid, layer_scores)
        p = subparams(params, f"otb{i}.")
        pyramid = build_pyramid(grid, cfg.height, p, cfg.bn_eps)
        result.level_counts.append(pyramid.counts())
        result.down_ratios.append(pyramid.down_ratio_observed)
        grid = grid.with_features(otb_forward(pyramid, p, cfg, layer_scores, mode, rng))
    result.output = grid
    return result
