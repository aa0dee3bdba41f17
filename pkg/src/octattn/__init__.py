"""Octree-sparsified attention for sparse 3D voxel grids, with a verification harness."""

from .attention import (
    INFER,
    TRAIN,
    OctreeSelection,
    OTBConfig,
    cross_attention,
    ffn,
    init_otb_params,
    lepe,
    mhsa_top,
    octree_attention,
    otb_apply,
    otb_forward,
    sample_octants,
    topk_select,
)
from .estimators import ForegroundSegmenter, OctreeBackbone, OctreeTransformerBlock, check_grid
from .grid import EMPTY, DenseTokenBatch, SparseVoxelGrid, from_dense_batch, to_dense_batch
from .pyramid import FeaturePyramid, IndexBank, build_pyramid, level_stats, upsample
from .semantic import (
    SamConfig,
    SegScores,
    focal_loss,
    init_seg_params,
    label_voxels,
    sam_mask,
    sape,
    sape_split,
    seg_branch,
)
from .sparse_conv import SubmConvParams, subm_conv
from .tensor import GradReport, Tensor, grad_check
from .voxel import PointCloud, embed, init_embed_params, load_points, voxelize

__version__ = "0.1.0"

__all__ = [
    "EMPTY",
    "INFER",
    "TRAIN",
    "DenseTokenBatch",
    "FeaturePyramid",
    "ForegroundSegmenter",
    "GradReport",
    "IndexBank",
    "OTBConfig",
    "OctreeBackbone",
    "OctreeSelection",
    "OctreeTransformerBlock",
    "PointCloud",
    "SamConfig",
    "SegScores",
    "SparseVoxelGrid",
    "SubmConvParams",
    "Tensor",
    "build_pyramid",
    "check_grid",
    "cross_attention",
    "embed",
    "ffn",
    "focal_loss",
    "from_dense_batch",
    "grad_check",
    "init_embed_params",
    "init_otb_params",
    "init_seg_params",
    "label_voxels",
    "lepe",
    "level_stats",
    "load_points",
    "mhsa_top",
    "octree_attention",
    "otb_apply",
    "otb_forward",
    "sam_mask",
    "sample_octants",
    "sape",
    "sape_split",
    "seg_branch",
    "subm_conv",
    "to_dense_batch",
    "topk_select",
    "upsample",
    "voxelize",
]
