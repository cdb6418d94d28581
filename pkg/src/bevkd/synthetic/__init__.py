"""Procedural driving scenes with simulated LiDAR, radar and cameras."""
from .config import CameraConfig, ConditionConfig, LidarConfig, ObjectSpec, RadarConfig, WorldConfig
from .dataset import read_dataset, tag_counts, write_dataset
from .raycast import cast_rays, march_ray
from .scene import (
    generate_scene,
    rasterize,
    simulate_camera_views,
    simulate_lidar,
    simulate_radar,
    surface_hits,
)

__all__ = [
    "CameraConfig", "ConditionConfig", "LidarConfig", "ObjectSpec", "RadarConfig", "WorldConfig",
    "read_dataset", "write_dataset", "tag_counts", "cast_rays", "march_ray", "generate_scene",
    "rasterize", "simulate_camera_views", "simulate_lidar", "simulate_radar", "surface_hits",
]
