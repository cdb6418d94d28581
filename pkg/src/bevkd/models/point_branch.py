"""Pillar features and the multi-scale point BEV encoder."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..grid import BEVFeatureMap, ConfigError, GridConfig, PointCloud, world_to_voxel
from .params import PointBranchParams

LIDAR_FEATURES = ("log_count", "mean_z", "max_z")
RADAR_FEATURES = LIDAR_FEATURES + ("mean_rcs", "mean_speed", "mean_dir_x", "mean_dir_y")


def pillar_feature_names(kind: str):
    return {"lidar": LIDAR_FEATURES, "radar": RADAR_FEATURES}[kind]


def pillarize(cloud: PointCloud, grid: GridConfig) -> BEVFeatureMap:
    """Aggregate a cloud into per-pillar statistics at scale 0.

    Channels are ``log1p(count)``, mean and max height normalized to
    ``[0, 1]`` over the z range, and for radar additionally mean RCS, mean
    speed and the mean unit heading ``(dx, dy)`` (zero for static returns).
    Points outside the grid are dropped and empty pillars stay zero.  All
    reductions run over a canonical point order, so the result does not
    depend on the input order.
    """
    names = pillar_feature_names(cloud.kind)
    _, H, W = grid.dims
    out = np.zeros((len(names), H * W), dtype=np.float64)
    pts = cloud.points.astype(np.float64)
    if len(pts):
        idx = world_to_voxel(pts[:, :3], grid)
        keep = idx[:, 0] >= 0
        pts, idx = pts[keep], idx[keep]
    if len(pts):
        cell = idx[:, 1] * W + idx[:, 2]
        order = np.lexsort(tuple(pts[:, k] for k in range(pts.shape[1] - 1, -1, -1)) + (cell,))
        pts, cell = pts[order], cell[order]
        z0, z1 = grid.z_range
        zn = (pts[:, 2] - z0) / (z1 - z0)
        count = np.bincount(cell, minlength=H * W).astype(np.float64)
        occ = count > 0
        out[0] = np.log1p(count)
        out[1, occ] = np.bincount(cell, zn, H * W)[occ] / count[occ]
        zmax = np.full(H * W, -np.inf)
        np.maximum.at(zmax, cell, zn)
        out[2, occ] = zmax[occ]
        if cloud.kind == "radar":
            speed = np.hypot(pts[:, 4], pts[:, 5])
            safe = np.where(speed > 0, speed, 1.0)
            dx = np.where(speed > 0, pts[:, 4] / safe, 0.0)
            dy = np.where(speed > 0, pts[:, 5] / safe, 0.0)
            for ch, v in ((3, pts[:, 3]), (4, speed), (5, dx), (6, dy)):
                out[ch, occ] = np.bincount(cell, v, H * W)[occ] / count[occ]
    return BEVFeatureMap(out.reshape(len(names), H, W).astype(np.float32), 0)


def conv_stack(cin: int, cout: int, depth: int, stride: int = 1) -> nn.Sequential:
    layers = [nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.SiLU()]
    for _ in range(max(depth, 1) - 1):
        layers += [nn.Conv2d(cout, cout, 3, padding=1), nn.SiLU()]
    return nn.Sequential(*layers)


class BEVEncoder(nn.Module):
    """Three-scale strided conv stack: scale ``i`` halves the plane ``i`` times."""

    def __init__(self, in_channels: int, channels, depths):
        super().__init__()
        c0, c1, c2 = channels
        self.in_channels = in_channels
        self.channels = tuple(channels)
        self.stage0 = conv_stack(in_channels, c0, depths[0])
        self.stage1 = conv_stack(c0, c1, depths[1], stride=2)
        self.stage2 = conv_stack(c1, c2, depths[2], stride=2)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ConfigError(f"encoder expects {self.in_channels} input channels, got {x.shape[1]}")
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ConfigError(f"BEV plane {tuple(x.shape[-2:])} must be divisible by 4")
        f0 = self.stage0(x)
        f1 = self.stage1(f0)
        f2 = self.stage2(f1)
        return [f0, f1, f2]


class PointBranch(nn.Module):
    """Point cloud pillars to ``[F_p0, F_p1, F_p2]`` plus scale-0 auxiliary logits."""

    def __init__(self, kind: str, params: PointBranchParams, n_classes: int):
        super().__init__()
        self.kind = kind
        self.params = params
        self.encoder = BEVEncoder(len(pillar_feature_names(kind)), params.channels, params.depths)
        if params.aux_heads:
            self.occ_head = nn.Conv2d(params.channels[0], 1, 1)
            self.sem_head = nn.Conv2d(params.channels[0], n_classes, 1)

    def forward(self, pillars):
        feats = self.encoder(pillars)
        aux = None
        if self.params.aux_heads:
            aux = {"occupancy": self.occ_head(feats[0])[:, 0], "semantic": self.sem_head(feats[0])}
        return feats, aux


def encode_point_bev(pillar_map, branch: PointBranch):
    """Run ``branch`` on one pillar map (``BEVFeatureMap`` or ``(C, H, W)`` tensor)."""
    x = pillar_map.data if isinstance(pillar_map, BEVFeatureMap) else pillar_map
    x = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x)
    x = x.to(next(branch.parameters()).dtype)
    squeeze = x.dim() == 3
    if squeeze:
        x = x[None]
    feats, aux = branch(x)
    if squeeze:
        feats = [f[0] for f in feats]
        aux = {k: v[0] for k, v in aux.items()} if aux else None
    return feats, aux


def aux_losses(aux: dict, gt: torch.Tensor, table):
    """Pillar occupancy BCE and dominant-class CE at scale 0.

    ``gt`` is ``(B, Z, H, W)`` integer labels.  The occupancy target is the
    scale-0 occupancy mask; the semantic target is the most frequent
    semantic label in the pillar (ties to the lowest id), over occupied
    pillars only.
    """
    from ..distill import occupancy_mask_tensor

    occ_t = occupancy_mask_tensor(gt, table, 0).to(aux["occupancy"].dtype)
    l_c = F.binary_cross_entropy_with_logits(aux["occupancy"], occ_t)
    n = table.n_classes
    onehot = F.one_hot(gt.long(), num_classes=max(table.valid_ids) + 1)[..., 1:n + 1]
    hist = onehot.sum(dim=1)  # (B, H, W, n)
    target = hist.argmax(dim=-1)
    m = occ_t > 0.5
    if m.any():
        logits = aux["semantic"].permute(0, 2, 3, 1)[m]
        l_s = F.cross_entropy(logits, target[m])
    else:
        l_s = aux["semantic"].sum() * 0.0
    return l_c, l_s
