"""Grid geometry, label conventions and the shared domain types.

Memory layout is fixed once here and used everywhere: volumes are indexed
``(Z, H, W)`` with ``H`` running along world ``y`` and ``W`` along world
``x``.  Voxel intervals are half-open, ``[lo + i*s, lo + (i+1)*s)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "GridConfig",
    "LabelTable",
    "VoxelGrid",
    "PointCloud",
    "BEVFeatureMap",
    "CameraBundle",
    "SceneSample",
    "ConfigError",
    "world_to_voxel",
    "voxel_center",
    "CONDITION_TAGS",
]

CONDITION_TAGS = ("sun", "rain", "night")


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration."""


def _axis_dim(lo: float, hi: float, size: float, name: str) -> int:
    extent = hi - lo
    if extent <= 0:
        raise ConfigError(f"{name}_range must be increasing, got ({lo}, {hi})")
    n = extent / size
    dim = int(round(n))
    if dim <= 0 or abs(n - dim) > 1e-6 * max(1.0, n):
        raise ConfigError(
            f"{name}_range extent {extent} is not an integer multiple of voxel_size {size}"
        )
    return dim


@dataclass(frozen=True)
class GridConfig:
    """Axis-aligned voxel grid over the ego frame."""

    x_range: Tuple[float, float] = (-6.4, 6.4)
    y_range: Tuple[float, float] = (-6.4, 6.4)
    z_range: Tuple[float, float] = (-1.0, 2.2)
    voxel_size: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "x_range", tuple(float(v) for v in self.x_range))
        object.__setattr__(self, "y_range", tuple(float(v) for v in self.y_range))
        object.__setattr__(self, "z_range", tuple(float(v) for v in self.z_range))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        if not self.voxel_size > 0:
            raise ConfigError(f"voxel_size must be positive, got {self.voxel_size}")
        # validates the integer-multiple invariant
        self.dims

    @classmethod
    def paper(cls) -> "GridConfig":
        """The 40 x 512 x 512 benchmark volume (0.2 m voxels)."""
        return cls((-51.2, 51.2), (-51.2, 51.2), (-5.0, 3.0), 0.2)

    @classmethod
    def desk(cls) -> "GridConfig":
        """Default desk-scale volume, 16 x 64 x 64."""
        return cls()

    @classmethod
    def small(cls) -> "GridConfig":
        """8 x 32 x 32 volume used by the quick experiments."""
        return cls((-3.2, 3.2), (-3.2, 3.2), (-1.0, 0.6), 0.2)

    @classmethod
    def tiny(cls) -> "GridConfig":
        """8 x 16 x 16 volume used by gradient checks."""
        return cls((-1.6, 1.6), (-1.6, 1.6), (-1.0, 0.6), 0.2)

    @property
    def dims(self) -> Tuple[int, int, int]:
        """``(Z, H, W)``."""
        return (
            _axis_dim(*self.z_range, self.voxel_size, "z"),
            _axis_dim(*self.y_range, self.voxel_size, "y"),
            _axis_dim(*self.x_range, self.voxel_size, "x"),
        )

    @property
    def lower(self) -> np.ndarray:
        """Lower corner in ``(z, y, x)`` order, matching ``dims``."""
        return np.array([self.z_range[0], self.y_range[0], self.x_range[0]])

    def bev_shape(self, scale: int = 0) -> Tuple[int, int]:
        _, h, w = self.dims
        f = 2 ** scale
        if h % f or w % f:
            raise ConfigError(f"grid {h}x{w} is not divisible by 2**{scale}")
        return h // f, w // f

    def to_dict(self) -> dict:
        return {
            "x_range": list(self.x_range),
            "y_range": list(self.y_range),
            "z_range": list(self.z_range),
            "voxel_size": self.voxel_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        return cls(tuple(d["x_range"]), tuple(d["y_range"]), tuple(d["z_range"]), d["voxel_size"])


def _axis_index(p: np.ndarray, lo: float, size: float, dim: int) -> np.ndarray:
    i = np.floor((p - lo) / size).astype(np.int64)
    # snap so that lo + i*size <= p < lo + (i+1)*size holds in floating point
    i = np.where(lo + (i + 1) * size <= p, i + 1, i)
    i = np.where(lo + i * size > p, i - 1, i)
    return np.where((i >= 0) & (i < dim) & np.isfinite(p), i, -1)


def world_to_voxel(points, grid: GridConfig):
    """Map xyz coordinates (meters) to ``(z, h, w)`` voxel indices.

    Accepts a single point or an ``(N, >=3)`` array.  Out-of-range points
    yield ``None`` for a single point and ``-1`` rows for arrays; this is a
    value, not an error.
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    Z, H, W = grid.dims
    iz = _axis_index(p[:, 2], grid.z_range[0], grid.voxel_size, Z)
    ih = _axis_index(p[:, 1], grid.y_range[0], grid.voxel_size, H)
    iw = _axis_index(p[:, 0], grid.x_range[0], grid.voxel_size, W)
    idx = np.stack([iz, ih, iw], axis=1)
    bad = (idx < 0).any(axis=1)
    idx[bad] = -1
    if single:
        return None if bad[0] else tuple(int(v) for v in idx[0])
    return idx


def voxel_center(index, grid: GridConfig) -> np.ndarray:
    """World xyz of the center of voxel ``(z, h, w)``; vectorized over rows."""
    idx = np.asarray(index, dtype=np.float64)
    single = idx.ndim == 1
    idx = np.atleast_2d(idx)
    s = grid.voxel_size
    xyz = np.stack(
        [
            grid.x_range[0] + (idx[:, 2] + 0.5) * s,
            grid.y_range[0] + (idx[:, 1] + 0.5) * s,
            grid.z_range[0] + (idx[:, 0] + 0.5) * s,
        ],
        axis=1,
    )
    return xyz[0] if single else xyz


@dataclass(frozen=True)
class LabelTable:
    """Label ids: ``empty_id``, semantic classes, optional ``noise_id``.

    Semantic classes take ids ``1..C_n`` with empty at 0 so that a label id
    doubles as the logit channel index; noise sits after the last class.
    """

    class_names: Tuple[str, ...] = ("ground", "vehicle", "pedestrian", "vegetation", "structure")
    empty_id: int = 0
    noise_id: Optional[int] = 6

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        sem = set(self.semantic_ids)
        if self.empty_id != 0:
            raise ConfigError("empty_id must be 0 (it is logit channel 0)")
        if self.noise_id is not None and (self.noise_id in sem or self.noise_id == self.empty_id):
            raise ConfigError("noise_id must differ from every other label id")

    @property
    def n_classes(self) -> int:
        """``C_n``, the number of semantic classes."""
        return len(self.class_names)

    @property
    def n_logits(self) -> int:
        return self.n_classes + 1

    @property
    def n_labels(self) -> int:
        return self.n_classes + 1 + (self.noise_id is not None)

    @property
    def semantic_ids(self) -> Tuple[int, ...]:
        return tuple(range(1, self.n_classes + 1))

    @property
    def valid_ids(self) -> Tuple[int, ...]:
        ids = (self.empty_id,) + self.semantic_ids
        return ids + ((self.noise_id,) if self.noise_id is not None else ())

    def class_id(self, name: str) -> int:
        return self.class_names.index(name) + 1

    def to_dict(self) -> dict:
        return {"class_names": list(self.class_names), "empty_id": self.empty_id,
                "noise_id": self.noise_id}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelTable":
        return cls(tuple(d["class_names"]), d["empty_id"], d["noise_id"])


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    labels: np.ndarray
    grid: GridConfig = field(default_factory=GridConfig)
    table: LabelTable = field(default_factory=LabelTable)

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if labels.shape != self.grid.dims:
            raise ValueError(f"labels shape {labels.shape} != grid dims {self.grid.dims}")
        if not np.isin(labels, self.table.valid_ids).all():
            bad = np.setdiff1d(np.unique(labels), self.table.valid_ids)
            raise ValueError(f"labels contain ids not in the table: {bad.tolist()}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    def __eq__(self, other):
        return (
            isinstance(other, VoxelGrid)
            and self.grid == other.grid
            and self.table == other.table
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class PointCloud:
    """LiDAR rows ``(x, y, z)``; radar rows ``(x, y, z, rcs, vx, vy)``."""

    kind: str
    points: np.ndarray

    def __post_init__(self):
        width = {"lidar": 3, "radar": 6}.get(self.kind)
        if width is None:
            raise ValueError(f"unknown point cloud kind {self.kind!r}")
        pts = np.asarray(self.points, dtype=np.float32).reshape(-1, width)
        if not np.isfinite(pts[:, :3]).all():
            raise ValueError("point coordinates must be finite")
        pts = np.ascontiguousarray(pts)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        return (
            isinstance(other, PointCloud)
            and self.kind == other.kind
            and np.array_equal(self.points, other.points)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class BEVFeatureMap:
    """A ``(C, H, W)`` feature plane at a given power-of-two scale."""

    data: np.ndarray
    scale_index: int = 0

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3:
            raise ValueError(f"BEV feature map must be (C, H, W), got {d.shape}")
        if not np.isfinite(d).all():
            raise ValueError("BEV features must be finite")
        object.__setattr__(self, "data", d)

    def check_grid(self, grid: GridConfig) -> None:
        if self.data.shape[1:] != grid.bev_shape(self.scale_index):
            raise ValueError(
                f"map {self.data.shape[1:]} does not match grid scale {self.scale_index}"
                f" {grid.bev_shape(self.scale_index)}"
            )


@dataclass(frozen=True, eq=False)
class CameraBundle:
    """Per-view images, calibration and rendered depth.

    ``extrinsics[v]`` is the 4x4 camera-to-world transform; cameras use the
    x-right / y-down / z-forward convention.  Pixels without a hit carry
    ``depth = 0`` (sentinel).
    """

    images: np.ndarray  # (V, 3, h, w)
    intrinsics: np.ndarray  # (V, 3, 3)
    extrinsics: np.ndarray  # (V, 4, 4)
    gt_depth: np.ndarray  # (V, h, w)

    def __post_init__(self):
        imgs = np.ascontiguousarray(self.images, dtype=np.float32)
        K = np.ascontiguousarray(self.intrinsics, dtype=np.float64)
        T = np.ascontiguousarray(self.extrinsics, dtype=np.float64)
        D = np.ascontiguousarray(self.gt_depth, dtype=np.float32)
        if imgs.ndim != 4 or imgs.shape[1] != 3 or len(imgs) < 1:
            raise ValueError(f"images must be (V>=1, 3, h, w), got {imgs.shape}")
        v, _, h, w = imgs.shape
        if K.shape != (v, 3, 3) or T.shape != (v, 4, 4) or D.shape != (v, h, w):
            raise ValueError("camera bundle arrays disagree on view count or image size")
        if np.any(np.abs(np.linalg.det(K)) < 1e-12):
            raise ValueError("intrinsics must be invertible")
        if np.any(D < 0):
            raise ValueError("depth must be positive where defined")
        for a in (imgs, K, T, D):
            a.setflags(write=False)
        object.__setattr__(self, "images", imgs)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics", T)
        object.__setattr__(self, "gt_depth", D)

    @property
    def n_views(self) -> int:
        return self.images.shape[0]

    def __eq__(self, other):
        return isinstance(other, CameraBundle) and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("images", "intrinsics", "extrinsics", "gt_depth")
        )

    __hash__ = None


@dataclass(frozen=True)
class SceneObject:
    """Placed primitive: ``shape`` is ``box`` or ``cylinder``.

    ``center`` is the xy footprint center, ``size`` is (sx, sy, height) for
    boxes and (radius, radius, height) for cylinders.
    """

    label: int
    shape: str
    center: Tuple[float, float]
    size: Tuple[float, float, float]
    velocity: Tuple[float, float] = (0.0, 0.0)

    def to_dict(self) -> dict:
        return {"label": self.label, "shape": self.shape, "center": list(self.center),
                "size": list(self.size), "velocity": list(self.velocity)}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneObject":
        return cls(int(d["label"]), d["shape"], tuple(d["center"]), tuple(d["size"]),
                   tuple(d["velocity"]))


@dataclass(frozen=True, eq=False)
class SceneSample:
    gt: VoxelGrid
    lidar: Optional[PointCloud]
    radar: Optional[PointCloud]
    cameras: Optional[CameraBundle]
    tags: frozenset
    seed: int
    objects: Tuple[SceneObject, ...] = ()

    def __post_init__(self):
        tags = frozenset(self.tags)
        unknown = tags - set(CONDITION_TAGS)
        if unknown:
            raise ValueError(f"unknown condition tags {sorted(unknown)}")
        object.__setattr__(self, "tags", tags)
        object.__setattr__(self, "objects", tuple(self.objects))

    def __eq__(self, other):
        return (
            isinstance(other, SceneSample)
            and self.seed == other.seed
            and self.tags == other.tags
            and self.objects == other.objects
            and self.gt == other.gt
            and self.lidar == other.lidar
            and self.radar == other.radar
            and self.cameras == other.cameras
        )

    __hash__ = None


def tag_key(tags: Sequence[str]) -> str:
    """Canonical string for a tag set, e.g. ``night+rain``."""
    return "+".join(sorted(tags))
