"""Point, image and fusion networks."""
from .fusion import ARF, FusionNet, ResidualAdapter, SSCNet, arf_fuse, fusion_forward, logits_view, predict_grid
from .image_branch import (
    ImageBranch,
    ImageEncoder,
    SplatGeometry,
    depth_supervision_loss,
    lift_splat,
    splat_geometry,
)
from .params import FusionParams, ImageBranchParams, ModelParams, PointBranchParams
from .point_branch import BEVEncoder, PointBranch, aux_losses, pillarize

__all__ = [
    "ARF", "FusionNet", "ResidualAdapter", "SSCNet", "arf_fuse", "fusion_forward", "logits_view",
    "predict_grid", "ImageBranch", "ImageEncoder", "SplatGeometry", "depth_supervision_loss",
    "lift_splat", "splat_geometry", "FusionParams", "ImageBranchParams", "ModelParams",
    "PointBranchParams", "BEVEncoder", "PointBranch", "aux_losses", "pillarize",
]
