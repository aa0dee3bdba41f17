"""Submanifold sparse 3x3x3 convolution.

Outputs exist only at already non-empty sites and only non-empty neighbours
of the same scene contribute, so the sparsity pattern is preserved.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .grid import EMPTY, SparseVoxelGrid
from .tensor import Tensor

OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
CENTER = 13


@dataclass(frozen=True)
class SubmConvParams:
    kernel: Tensor  # 3 x 3 x 3 x c_in x c_out, indexed [dx+1, dy+1, dz+1]
    bias: Tensor

    def __post_init__(self):
        if self.kernel.shape[:3] != (3, 3, 3):
            raise ValueError(f"kernel must be 3x3x3xCinxCout, got {self.kernel.shape}")

    @property
    def c_in(self) -> int:
        return self.kernel.shape[3]

    @property
    def c_out(self) -> int:
        return self.kernel.shape[4]

    @classmethod
    def init(cls, c_in: int, c_out: int, rng: np.random.Generator, requires_grad: bool = False):
        std = 1.0 / np.sqrt(27 * c_in)
        return cls(
            Tensor(rng.normal(0.0, std, (3, 3, 3, c_in, c_out)), requires_grad=requires_grad),
            Tensor(np.zeros(c_out), requires_grad=requires_grad),
        )

    @classmethod
    def identity(cls, channels: int):
        kernel = np.zeros((3, 3, 3, channels, channels))
        kernel[1, 1, 1] = np.eye(channels)
        return cls(Tensor(kernel), Tensor(np.zeros(channels)))


def neighbor_table(grid: SparseVoxelGrid) -> np.ndarray:
    """27 x M table of neighbour rows (EMPTY where the neighbour is empty)."""
    m = len(grid)
    table = np.full((len(OFFSETS), m), EMPTY, dtype=np.int64)
    if m == 0:
        return table
    for i, off in enumerate(OFFSETS):
        table[i] = grid.lookup(grid.batch_ids, grid.coords + off)
    return table


def subm_conv(
    grid: SparseVoxelGrid,
    params: SubmConvParams,
    features: Optional[Tensor] = None,
    neighbors: Optional[np.ndarray] = None,
) -> Tensor:
    """Convolve ``features`` (default: the grid's own) at the grid's sites.

    ``neighbors`` may be passed to reuse a table from ``neighbor_table``.
    """
    x = grid.features if features is None else features
    if x.shape[-1] != params.c_in:
        raise T.DimensionError(f"feature dim {x.shape[-1]} != kernel c_in {params.c_in}")
    nbr = neighbor_table(grid) if neighbors is None else neighbors
    kernel = T.reshape(params.kernel, (27, params.c_in, params.c_out))
    out = None
    for i in range(len(OFFSETS)):
        idx = nbr[i]
        if not (idx != EMPTY).any():
            continue
        term = T.matmul(T.gather(x, idx), T.gather(kernel, np.array(i)))
        out = term if out is None else T.add(out, term)
    if out is None:
        out = Tensor(np.zeros((len(grid), params.c_out)))
    return T.add(out, params.bias)
