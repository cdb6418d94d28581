from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

from ..grid import ConfigError


@dataclass(frozen=True)
class PointBranchParams:
    channels: Tuple[int, int, int] = (16, 24, 32)
    depths: Tuple[int, int, int] = (2, 2, 2)
    aux_heads: bool = True


@dataclass(frozen=True)
class ImageBranchParams:
    widths: Tuple[int, int, int] = (16, 24, 32)
    feature_channels: int = 16
    depth_bins: Tuple[float, float, int] = (0.2, 6.6, 32)
    stride: int = 4
    bev_channels: Tuple[int, int, int] = (16, 24, 32)
    bev_depths: Tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        lo, hi, n = self.depth_bins
        if not (hi > lo and int(n) >= 1):
            raise ConfigError("depth bins must be strictly increasing")


@dataclass(frozen=True)
class FusionParams:
    channels: Tuple[int, int, int] = (16, 24, 32)
    stages: int = 3

    def __post_init__(self):
        if self.stages not in (0, 1, 2, 3):
            raise ConfigError(f"stages must be in 0..3, got {self.stages}")


@dataclass(frozen=True)
class ModelParams:
    point: PointBranchParams = field(default_factory=PointBranchParams)
    image: ImageBranchParams = field(default_factory=ImageBranchParams)
    fusion: FusionParams = field(default_factory=FusionParams)

    def __post_init__(self):
        c = tuple(self.fusion.channels)
        if tuple(self.point.channels) != c:
            raise ConfigError(f"point branch channels {self.point.channels} != fusion channels {c}")
        if tuple(self.image.bev_channels) != c:
            raise ConfigError(f"camera BEV channels {self.image.bev_channels} != fusion channels {c}")
