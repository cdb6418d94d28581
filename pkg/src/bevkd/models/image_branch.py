"""Camera encoder, depth-distribution lift-splat and camera BEV encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..grid import GridConfig, world_to_voxel
from .params import ImageBranchParams
from .point_branch import BEVEncoder

_EPS = 1e-8


def depth_bin_centers(bins) -> np.ndarray:
    lo, hi, n = bins
    n = int(n)
    step = (hi - lo) / n
    return lo + (np.arange(n) + 0.5) * step


def depth_bin_index(depth, bins):
    """Bin containing each depth, ``-1`` outside ``[lo, hi)`` or where depth <= 0."""
    lo, hi, n = bins
    n = int(n)
    d = np.asarray(depth, dtype=np.float64)
    idx = np.floor((d - lo) / ((hi - lo) / n)).astype(np.int64)
    ok = (d > 0) & (d >= lo) & (d < hi) & (idx >= 0) & (idx < n)
    return np.where(ok, idx, -1)


@dataclass(frozen=True)
class SplatGeometry:
    """Flat BEV cell per (view, bin, row, col); ``-1`` marks out-of-grid points."""

    cells: torch.Tensor  # (V, D, h, w) int64
    bev_shape: tuple

    @property
    def n_cells(self) -> int:
        return self.bev_shape[0] * self.bev_shape[1]


def splat_geometry(intrinsics, extrinsics, grid: GridConfig, bins, feat_hw, stride) -> SplatGeometry:
    """Unproject every feature pixel at every depth-bin center.

    Feature pixel ``(i, j)`` looks along the ray through full-resolution
    image point ``((j + 0.5) * stride, (i + 0.5) * stride)``; depth is the
    Euclidean distance along that ray.  A point is kept when it falls in a
    grid voxel; the height coordinate is then collapsed.
    """
    from ..synthetic.scene import pixel_rays

    h, w = feat_hw
    centers = depth_bin_centers(bins)
    _, H, W = grid.dims
    out = []
    for K, T in zip(np.asarray(intrinsics), np.asarray(extrinsics)):
        rays = pixel_rays(K, T, h, w, stride)  # (h, w, 3)
        pts = T[:3, 3] + centers[:, None, None, None] * rays[None]  # (D, h, w, 3)
        idx = world_to_voxel(pts.reshape(-1, 3), grid)
        flat = np.where(idx[:, 0] >= 0, idx[:, 1] * W + idx[:, 2], -1)
        out.append(flat.reshape(len(centers), h, w))
    return SplatGeometry(torch.from_numpy(np.stack(out)), (H, W))


def lift_splat(features, depth_dist, geometry: SplatGeometry, return_dropped: bool = False):
    """Accumulate ``depth_prob * feature`` into BEV cells by summation.

    ``features`` is ``(V, C, h, w)`` and ``depth_dist`` ``(V, D, h, w)``.
    Returns a ``(C, H, W)`` plane, and with ``return_dropped`` also the
    per-channel mass that fell outside the grid.
    """
    V, C, h, w = features.shape
    D = depth_dist.shape[1]
    contrib = depth_dist[:, None] * features[:, :, None]  # (V, C, D, h, w)
    contrib = contrib.permute(1, 0, 2, 3, 4).reshape(C, -1)
    cells = geometry.cells.reshape(-1)
    valid = cells >= 0
    bev = contrib.new_zeros(C, geometry.n_cells)
    bev = bev.index_add(1, cells[valid], contrib[:, valid])
    bev = bev.reshape(C, *geometry.bev_shape)
    if return_dropped:
        return bev, contrib[:, ~valid].sum(dim=1)
    return bev


class ImageEncoder(nn.Module):
    """Three-stage conv backbone with feature and categorical-depth heads."""

    def __init__(self, params: ImageBranchParams):
        super().__init__()
        w1, w2, w3 = params.widths
        if params.stride != 4:
            raise ValueError("the backbone downsamples by exactly 4")
        self.backbone = nn.Sequential(
            nn.Conv2d(3, w1, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w1, w2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w2, w3, 3, padding=1), nn.SiLU(),
        )
        self.feat_head = nn.Conv2d(w3, params.feature_channels, 1)
        self.depth_head = nn.Conv2d(w3, int(params.depth_bins[2]), 1)

    def forward(self, images):
        x = self.backbone(images)
        return self.feat_head(x), F.log_softmax(self.depth_head(x), dim=1)


class ImageBranch(nn.Module):
    def __init__(self, params: ImageBranchParams):
        super().__init__()
        self.params = params
        self.encoder = ImageEncoder(params)
        self.bev_encoder = BEVEncoder(params.feature_channels, params.bev_channels, params.bev_depths)

    def forward(self, images, geometries, flips=None):
        """``images`` is ``(B, V, 3, h, w)``; one ``SplatGeometry`` per sample."""
        B, V = images.shape[:2]
        feats, log_depth = self.encoder(images.flatten(0, 1))
        feats = feats.unflatten(0, (B, V))
        log_depth = log_depth.unflatten(0, (B, V))
        depth = log_depth.exp()
        bev = torch.stack([lift_splat(feats[b], depth[b], geometries[b]) for b in range(B)])
        if flips is not None:
            bev = flip_bev(bev, flips)
        return self.bev_encoder(bev), log_depth


def flip_bev(x, flips):
    """Flip each sample's trailing (H, W) plane; ``flips[b]`` is ``(flip_y, flip_x)``."""
    out = []
    for b, (fy, fx) in enumerate(flips):
        dims = [d for d, f in ((-2, fy), (-1, fx)) if f]
        out.append(torch.flip(x[b], dims) if dims else x[b])
    return torch.stack(out)


def extract_image_features(images, encoder: ImageEncoder):
    """Per-view ``(features, depth distribution)`` for a ``(V, 3, h, w)`` stack."""
    images = torch.as_tensor(images).to(next(encoder.parameters()).dtype)
    feats, log_depth = encoder(images)
    return feats, log_depth.exp()


def encode_camera_bev(bev, encoder: BEVEncoder):
    x = bev if bev.dim() == 4 else bev[None]
    out = encoder(x)
    return out if bev.dim() == 4 else [f[0] for f in out]


def sample_feature_depth(gt_depth, stride: int):
    """Ground-truth depth at the pixel nearest each feature-cell ray."""
    gt_depth = np.asarray(gt_depth)
    h, w = gt_depth.shape[-2:]
    rows = np.minimum(((np.arange(h // stride) + 0.5) * stride).astype(int), h - 1)
    cols = np.minimum(((np.arange(w // stride) + 0.5) * stride).astype(int), w - 1)
    return gt_depth[..., rows[:, None], cols[None, :]]


def depth_supervision_loss(depth_dist, gt_depth, bins, log_input: bool = False):
    """Mean cross-entropy of the depth distribution at the true depth bin.

    ``depth_dist`` is ``(..., D, h, w)`` probabilities (or log-probabilities
    when ``log_input``); ``gt_depth`` is ``(..., h, w)`` meters at the same
    resolution, with ``0`` or out-of-range depths ignored.
    """
    target = torch.as_tensor(depth_bin_index(np.asarray(gt_depth), bins))
    logp = depth_dist if log_input else torch.log(depth_dist.clamp_min(_EPS))
    logp = logp.movedim(-3, -1)  # (..., h, w, D)
    valid = target >= 0
    if not valid.any():
        return logp.sum() * 0.0
    picked = logp[valid].gather(1, target[valid][:, None])
    return -picked.mean()
