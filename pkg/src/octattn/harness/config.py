"""Run configuration shared by every CLI subcommand."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Optional, Union

from ..attention import INFER, TRAIN, OTBConfig
from ..semantic import SamConfig
from ..voxel import KITTI_VOXEL_SIZE, WOD_VOXEL_SIZE


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    voxel_size: list = field(default_factory=lambda: list(KITTI_VOXEL_SIZE))
    range_min: list = field(default_factory=lambda: [0.0, -40.0, -3.0])
    range_max: list = field(default_factory=lambda: [70.4, 40.0, 1.0])
    heights: list = field(default_factory=lambda: [4, 3])
    d: int = 64
    heads: int = 2
    head_dim: int = 32
    k: int = 8
    K: Optional[int] = None
    tau: float = 1.0
    gamma: float = 10000.0
    delta_q: float = 0.05
    delta_k: float = 0.2
    seed: int = 0
    mode: str = INFER

    def __post_init__(self):
        if self.K is None:
            self.K = 4 * self.k
        if self.heads * self.head_dim != self.d:
            raise ConfigError(f"d ({self.d}) must equal heads * head_dim ({self.heads}*{self.head_dim})")
        if self.mode not in (TRAIN, INFER):
            raise ConfigError(f"mode must be 'train' or 'infer', got {self.mode!r}")
        if len(self.voxel_size) != 3 or any(v <= 0 for v in self.voxel_size):
            raise ConfigError("voxel_size needs three positive components")
        if any(lo >= hi for lo, hi in zip(self.range_min, self.range_max)):
            raise ConfigError("range_min must be below range_max")
        if not self.heights or any(h < 1 for h in self.heights):
            raise ConfigError("heights must be a non-empty list of positive integers")
        if self.k < 1 or self.K < 1:
            raise ConfigError("k and K must be positive")
        SamConfig(self.delta_q, self.delta_k, self.gamma)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "RunConfig":
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def wod(cls, **overrides) -> "RunConfig":
        return cls(voxel_size=list(WOD_VOXEL_SIZE), **overrides)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def sam(self) -> SamConfig:
        return SamConfig(self.delta_q, self.delta_k, self.gamma)

    def otb(self, layer: int = 0, **overrides) -> OTBConfig:
        kw = dict(
            d=self.d,
            heads=self.heads,
            head_dim=self.head_dim,
            height=self.heights[layer],
            k=self.k,
            keys=self.K,
            tau=self.tau,
            sam=self.sam(),
        )
        kw.update(overrides)
        return OTBConfig(**kw)
