"""Turn scene samples into cached network inputs and batches."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch

from .grid import ConfigError, SceneSample
from .models.image_branch import SplatGeometry, sample_feature_depth, splat_geometry
from .models.params import ImageBranchParams
from .models.point_branch import pillarize

SENSOR_SETS = {
    "L": ("lidar", False),
    "L+C": ("lidar", True),
    "R": ("radar", False),
    "R+C": ("radar", True),
}


def parse_sensors(sensors: str):
    try:
        return SENSOR_SETS[sensors]
    except KeyError:
        raise ConfigError(f"sensor set must be one of {sorted(SENSOR_SETS)}, got {sensors!r}") from None


def check_samples(samples, sensors: str) -> List[SceneSample]:
    """Validate a list of scenes for a sensor set.

    A missing sensor raises ``ConfigError`` (a ``ValueError``); other
    inconsistencies raise ``ValueError``.
    """
    kind, camera = parse_sensors(sensors)
    samples = list(samples) if not isinstance(samples, SceneSample) else [samples]
    if not samples:
        raise ValueError("expected at least one sample")
    for i, s in enumerate(samples):
        if not isinstance(s, SceneSample):
            raise TypeError(f"sample {i} is {type(s).__name__}, expected SceneSample")
        if getattr(s, kind) is None:
            raise ConfigError(f"sample {i} has no {kind} data but sensor set {sensors} needs it")
        if camera and s.cameras is None:
            raise ConfigError(f"sample {i} has no camera data but sensor set {sensors} needs it")
    grids = {(s.gt.grid, s.gt.table) for s in samples}
    if len(grids) != 1:
        raise ValueError("samples use different grids or label tables")
    return samples


@dataclass
class Prepared:
    pillars: torch.Tensor  # (C, H, W)
    gt: torch.Tensor  # (Z, H, W) int64
    images: Optional[torch.Tensor] = None  # (V, 3, h, w)
    geometry: Optional[SplatGeometry] = None
    feat_depth: Optional[np.ndarray] = None  # (V, h', w')


_GEOM_CACHE = {}


def _geometry(cams, grid, params: ImageBranchParams):
    h, w = cams.images.shape[-2:]
    key = (cams.intrinsics.tobytes(), cams.extrinsics.tobytes(), grid, tuple(params.depth_bins),
           params.stride, h, w)
    if key not in _GEOM_CACHE:
        _GEOM_CACHE[key] = splat_geometry(cams.intrinsics, cams.extrinsics, grid, params.depth_bins,
                                          (h // params.stride, w // params.stride), params.stride)
    return _GEOM_CACHE[key]


def prepare(samples: Sequence[SceneSample], sensors: str, image_params: ImageBranchParams,
            dtype=torch.float32) -> List[Prepared]:
    kind, camera = parse_sensors(sensors)
    out = []
    for s in samples:
        grid = s.gt.grid
        pil = torch.from_numpy(np.array(pillarize(getattr(s, kind), grid).data)).to(dtype)
        p = Prepared(pil, torch.from_numpy(s.gt.labels.astype(np.int64)))
        if camera:
            p.images = torch.from_numpy(np.array(s.cameras.images)).to(dtype)
            p.geometry = _geometry(s.cameras, grid, image_params)
            p.feat_depth = sample_feature_depth(s.cameras.gt_depth, image_params.stride)
        out.append(p)
    return out


def flip_sample(p: Prepared, fy: bool, fx: bool) -> Prepared:
    """Mirror the BEV inputs and labels; camera inputs stay as captured."""
    dims = [d for d, f in ((-2, fy), (-1, fx)) if f]
    if not dims:
        return p
    return Prepared(torch.flip(p.pillars, dims), torch.flip(p.gt, dims), p.images, p.geometry, p.feat_depth)


def collate(items: Sequence[Prepared]):
    batch = {
        "pillars": torch.stack([p.pillars for p in items]),
        "gt": torch.stack([p.gt for p in items]),
        "images": None,
        "geometries": None,
        "feat_depth": None,
    }
    if items[0].images is not None:
        batch["images"] = torch.stack([p.images for p in items])
        batch["geometries"] = [p.geometry for p in items]
        batch["feat_depth"] = np.stack([p.feat_depth for p in items])
    return batch
