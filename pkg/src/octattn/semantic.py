"""Foreground segmentation, focal loss, semantic positional embedding and attention mask."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .grid import SparseVoxelGrid
from .sparse_conv import SubmConvParams, subm_conv
from .tensor import Tensor

SCORE_CLAMP = 1e-7


@dataclass(frozen=True)
class SamConfig:
    delta_q: float = 0.05
    delta_k: float = 0.2
    gamma: float = 10000.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("SAM gamma must be positive")
        if not (0.0 <= self.delta_q <= 1.0 and 0.0 <= self.delta_k <= 1.0):
            raise ValueError("SAM thresholds must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class SegScores:
    scores: Tensor
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        s = self.scores.data
        if s.size and (s.min() < 0.0 or s.max() > 1.0):
            raise ValueError("segmentation scores must lie in [0, 1]")


def init_seg_params(d: int, rng: np.random.Generator, requires_grad: bool = False) -> dict:
    conv = SubmConvParams.init(d, d, rng, requires_grad)
    return {
        "seg.conv.kernel": conv.kernel,
        "seg.conv.bias": conv.bias,
        "seg.weight": Tensor(rng.normal(0, 1 / np.sqrt(d), (d, 1)), requires_grad),
        "seg.bias": Tensor(np.zeros(1), requires_grad),
    }


def seg_branch(grid: SparseVoxelGrid, params: dict, neighbors: Optional[np.ndarray] = None) -> Tensor:
    """Per-voxel foreground probability: subm conv + ReLU, linear to 1, sigmoid."""
    conv = SubmConvParams(params["seg.conv.kernel"], params["seg.conv.bias"])
    h = T.relu(subm_conv(grid, conv, neighbors=neighbors))
    logits = T.linear(h, params["seg.weight"], params["seg.bias"])
    return T.reshape(T.sigmoid(logits), (-1,))


def load_boxes(path: Union[str, os.PathLike]) -> np.ndarray:
    """Read ``scene_id,xmin,ymin,zmin,xmax,ymax,zmax`` rows (header optional)."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                if lineno == 1:
                    continue
                raise ValueError(f"{path}:{lineno}: malformed box row") from None
            if len(vals) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 columns, got {len(vals)}")
            rows.append(vals)
    boxes = np.array(rows, dtype=np.float64).reshape(-1, 7)
    if np.any(boxes[:, 1:4] >= boxes[:, 4:7]):
        raise ValueError(f"{path}: box min must be below max on every axis")
    return boxes


def save_boxes(path: Union[str, os.PathLike], boxes: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", "xmin", "ymin", "zmin", "xmax", "ymax", "zmax"])
        for b in np.asarray(boxes).reshape(-1, 7):
            w.writerow([int(b[0])] + [repr(float(v)) for v in b[1:]])


def label_voxels(grid: SparseVoxelGrid, boxes: np.ndarray) -> np.ndarray:
    """True where the voxel centre lies in a same-scene box, min inclusive, max exclusive."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    labels = np.zeros(len(grid), dtype=bool)
    centers = grid.centers()
    for box in boxes:
        same = grid.batch_ids == int(box[0])
        inside = np.all((centers >= box[1:4]) & (centers < box[4:7]), axis=1)
        labels |= same & inside
    return labels


def focal_loss(scores: Tensor, labels: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean of -alpha_t (1 - p_t)**gamma log(p_t) over voxels."""
    y = np.asarray(labels, dtype=np.float64).reshape(scores.shape)
    p = T.clip(scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    p_t = T.add(T.mul(p, 2.0 * y - 1.0), 1.0 - y)
    alpha_t = np.where(y > 0, alpha, 1.0 - alpha)
    modulating = T.power(T.scale(p_t, -1.0) + 1.0, gamma)
    per_voxel = T.mul(T.mul(modulating, T.log(p_t)), -alpha_t)
    return T.mean(per_voxel)


def _position_block(centers: np.ndarray, scores: Tensor) -> Tensor:
    return T.concat([Tensor(centers), T.reshape(scores, (-1, 1))], axis=1)


def sape(features: Tensor, centers: np.ndarray, scores: Tensor, weight: Tensor) -> Tensor:
    """Project ``[x, y, z, score | f]`` through a bias-free (d+4) -> d linear map."""
    return T.matmul(T.concat([_position_block(centers, scores), features], axis=1), weight)


def sape_split(features: Tensor, centers: np.ndarray, scores: Tensor, weight: Tensor) -> Tensor:
    """Same map written as FC_{d->d}(f) + FC_{4->d}(x, y, z, score) over the rows of ``weight``."""
    d_in = weight.shape[0]
    w_pos = T.gather(weight, np.arange(4))
    w_feat = T.gather(weight, np.arange(4, d_in))
    return T.add(T.matmul(features, w_feat), T.matmul(_position_block(centers, scores), w_pos))


def sam_mask(s_q: np.ndarray, s_k: np.ndarray, cfg: SamConfig = SamConfig()) -> np.ndarray:
    """Additive pre-softmax mask: -gamma where a foreground query meets a background key.

    ``s_k`` is either one score per key (giving an N_q x N_k mask) or an
    N_q x K matrix of per-query key scores.  Rows of background queries
    (``s_q < delta_q``) stay all zero, i.e. unmasked.
    """
    s_q = np.asarray(s_q, dtype=np.float64)
    s_k = np.asarray(s_k, dtype=np.float64)
    fg_q = (s_q >= cfg.delta_q)[:, None]
    fg_k = s_k >= cfg.delta_k
    if fg_k.ndim == 1:
        fg_k = fg_k[None, :]
    return np.where(fg_q & ~fg_k, -cfg.gamma, 0.0)
