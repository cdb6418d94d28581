from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

from ..grid import ConfigError, GridConfig, LabelTable


@dataclass(frozen=True)
class ObjectSpec:
    """Placement ranges for one semantic class (sizes in meters)."""

    count: Tuple[int, int] = (0, 2)
    shape: str = "box"
    footprint: Tuple[float, float] = (0.6, 1.2)  # side length, or radius for cylinders
    aspect: Tuple[float, float] = (1.0, 1.0)  # second side / first side, boxes only
    height: Tuple[float, float] = (0.6, 1.0)
    speed: Tuple[float, float] = (0.0, 0.0)
    rcs_mean: float = 0.0
    rcs_std: float = 1.0


def _default_objects() -> Dict[str, ObjectSpec]:
    return {
        "vehicle": ObjectSpec((1, 3), "box", (0.8, 1.4), (0.5, 0.7), (0.6, 0.8), (1.0, 6.0), 10.0, 2.0),
        "pedestrian": ObjectSpec((0, 3), "cylinder", (0.15, 0.25), (1.0, 1.0), (0.8, 1.0), (0.3, 1.5), -5.0, 2.0),
        "vegetation": ObjectSpec((0, 2), "cylinder", (0.3, 0.5), (1.0, 1.0), (0.8, 1.2), (0.0, 0.0), 0.0, 2.0),
        "structure": ObjectSpec((0, 2), "box", (0.6, 1.6), (0.6, 1.4), (1.0, 1.4), (0.0, 0.0), 5.0, 2.0),
    }


@dataclass(frozen=True)
class LidarConfig:
    beams: int = 16
    points_per_beam: int = 256
    max_range: float = 12.0
    dropout: float = 0.0
    height: float = 0.4
    elevation_deg: Tuple[float, float] = (-30.0, 10.0)


@dataclass(frozen=True)
class RadarConfig:
    budget: int = 48
    position_noise: float = 0.05
    velocity_noise: float = 0.1
    # piecewise-linear detection probability over horizontal range (m, prob)
    detection_curve: Tuple[Tuple[float, float], ...] = ((0.0, 0.9), (12.0, 0.3))
    include_ground: bool = False


@dataclass(frozen=True)
class CameraConfig:
    num_views: int = 4
    image_size: Tuple[int, int] = (24, 48)
    fov_deg: float = 90.0
    height: float = 0.4
    pitch_deg: float = 15.0
    max_range: float = 12.0
    background: float = 0.0


@dataclass(frozen=True)
class ConditionConfig:
    """Per-tag sampling probability and sensor degradation."""

    p_rain: float = 0.3
    p_night: float = 0.3
    rain_lidar_dropout: float = 0.3
    rain_camera_fog: float = 0.3
    night_contrast: float = 0.35
    fog_level: float = 0.5


@dataclass(frozen=True)
class WorldConfig:
    grid: GridConfig = field(default_factory=GridConfig.small)
    table: LabelTable = field(default_factory=LabelTable)
    objects: Dict[str, ObjectSpec] = field(default_factory=_default_objects)
    ground_height: float = -0.6
    ground_class: str = "ground"
    noise_voxels: Tuple[int, int] = (0, 3)
    keep_out_radius: float = 0.8
    lidar: LidarConfig = field(default_factory=LidarConfig)
    radar: RadarConfig = field(default_factory=RadarConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    conditions: ConditionConfig = field(default_factory=ConditionConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        Z, H, W = self.grid.dims
        if Z * H * W <= 0:
            raise ConfigError("grid has zero volume")
        probs = {
            "lidar.dropout": self.lidar.dropout,
            "conditions.p_rain": self.conditions.p_rain,
            "conditions.p_night": self.conditions.p_night,
            "conditions.rain_lidar_dropout": self.conditions.rain_lidar_dropout,
            "conditions.rain_camera_fog": self.conditions.rain_camera_fog,
        }
        probs.update({f"radar.detection_curve[{i}]": p
                      for i, (_, p) in enumerate(self.radar.detection_curve)})
        for name, p in probs.items():
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {p}")
        if self.radar.position_noise < 0 or self.radar.velocity_noise < 0:
            raise ConfigError("noise sigma must be >= 0")
        if self.radar.budget < 0:
            raise ConfigError("radar.budget must be >= 0")
        if self.camera.num_views < 1:
            raise ConfigError("at least one camera view is required")
        if not 0.0 <= self.conditions.night_contrast <= 1.0:
            raise ConfigError("conditions.night_contrast must lie in [0, 1]")
        names = set(self.table.class_names)
        if self.ground_class not in names:
            raise ConfigError(f"ground_class {self.ground_class!r} not in label table")
        for name, spec in self.objects.items():
            if name not in names:
                raise ConfigError(f"object class {name!r} not in label table")
            lo, hi = spec.count
            if lo < 0 or hi < lo:
                raise ConfigError(f"objects.{name}.count must satisfy 0 <= min <= max")
            if spec.shape not in ("box", "cylinder"):
                raise ConfigError(f"objects.{name}.shape must be box or cylinder")
        rs = [r for r, _ in self.radar.detection_curve]
        if sorted(rs) != rs or not rs:
            raise ConfigError("radar.detection_curve ranges must be non-empty and increasing")
