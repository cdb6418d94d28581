"""BEV multi-sensor semantic scene completion with cross-modal distillation."""
from .grid import (
    BEVFeatureMap,
    CameraBundle,
    ConfigError,
    GridConfig,
    LabelTable,
    PointCloud,
    SceneSample,
    VoxelGrid,
    voxel_center,
    world_to_voxel,
)

from .synthetic import WorldConfig, generate_scene

__version__ = "0.1.0"

__all__ = [
    "BEVFeatureMap", "CameraBundle", "ConfigError", "GridConfig", "LabelTable", "PointCloud",
    "SceneSample", "VoxelGrid", "WorldConfig", "generate_scene", "voxel_center", "world_to_voxel",
]
