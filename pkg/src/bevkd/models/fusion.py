"""ARF gated fusion, the 2D BEV U-Net and the full SSC network."""
from __future__ import annotations

import hashlib
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..grid import ConfigError, GridConfig, LabelTable, VoxelGrid
from .image_branch import ImageBranch
from .params import ModelParams
from .point_branch import PointBranch, conv_stack


class ARF(nn.Module):
    """``out = a + sigmoid(conv([a, b])) * b``, gated per position and channel."""

    def __init__(self, channels: int):
        super().__init__()
        self.gate = nn.Conv2d(2 * channels, channels, 3, padding=1)

    def forward(self, a, b):
        return arf_fuse(a, b, self)


def arf_fuse(a, b, arf: ARF):
    if a.shape != b.shape:
        raise ValueError(f"ARF inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    squeeze = a.dim() == 3
    if squeeze:
        a, b = a[None], b[None]
    g = torch.sigmoid(arf.gate(torch.cat([a, b], dim=1)))
    out = a + g * b
    return out[0] if squeeze else out


class ResidualAdapter(nn.Module):
    """Per-position 2-layer MLP projector plus the ARF that adds it back."""

    def __init__(self, student_channels: int, teacher_channels: int):
        super().__init__()
        if student_channels != teacher_channels:
            raise ConfigError("residual adapters need matching student/teacher widths")
        self.mlp = nn.Sequential(
            nn.Conv2d(student_channels, teacher_channels, 1), nn.SiLU(),
            nn.Conv2d(teacher_channels, teacher_channels, 1),
        )
        self.arf = ARF(teacher_channels)

    def forward(self, f):
        proj = self.mlp(f)
        return self.arf(f, proj), proj


class FusionNet(nn.Module):
    """Encoder fuses point features by ARF and camera features by addition.

    Returns the logits ``((C_n+1) * Z, H, W)`` and four taps: the fused
    encoder maps at scales 0, 1, 2 and the last decoder map (scale 0).
    """

    def __init__(self, channels, n_logits: int, z_dim: int, stages: int):
        super().__init__()
        c0, c1, c2 = channels
        self.stages = stages
        self.n_logits = n_logits
        self.z_dim = z_dim
        self.stem = conv_stack(c0, c0, 1)
        self.arf = nn.ModuleList([ARF(c0), ARF(c1), ARF(c2)])
        self.down = nn.ModuleList([conv_stack(c0, c1, 1, 2), conv_stack(c1, c2, 1, 2), conv_stack(c2, c2, 2, 2)])
        self.up = nn.ModuleList([conv_stack(c1, c0, 1), conv_stack(c2, c1, 1), conv_stack(c2, c2, 1)])
        self.merge = nn.ModuleList([conv_stack(c0, c0, 1), conv_stack(c1, c1, 1), conv_stack(c2, c2, 1)])
        self.head = nn.Conv2d(c0, n_logits * z_dim, 1)

    def forward(self, point_feats, camera_feats=None, adapters=None, replace=True):
        if point_feats is None or len(point_feats) != 3:
            raise ValueError("fusion needs the three point feature maps")
        taps, projs = [], {}
        prev = self.stem(point_feats[0])
        for i in range(3):
            f = self.arf[i](prev, point_feats[i])
            if camera_feats is not None and i < self.stages:
                f = f + camera_feats[i]
            if adapters is not None and str(i) in adapters:
                f_star, projs[i] = adapters[str(i)](f)
                if replace:
                    f = f_star
            taps.append(f)
            prev = self.down[i](f)
        x = prev
        for i in (2, 1, 0):
            x = self.up[i](F.interpolate(x, scale_factor=2, mode="nearest"))
            x = self.merge[i](x + taps[i])
        taps.append(x)
        return self.head(x), taps, projs


def logits_view(y, n_logits: int, z_dim: int):
    """``((C_n+1)*Z, H, W)`` to ``(C_n+1, Z, H, W)``, class-major over Z."""
    return y.unflatten(-3, (n_logits, z_dim))


def predict_grid(logits, grid: GridConfig, table: LabelTable) -> VoxelGrid:
    """Per-voxel argmax of the softmax; ties resolve to the lowest class id.

    ``logits`` may be the raw head output or its ``(C_n+1, Z, H, W)`` view.
    """
    y = torch.as_tensor(logits).detach().to(torch.float64)
    Z = grid.dims[0]
    if y.dim() == 3:
        y = logits_view(y, table.n_logits, Z)
    if y.shape != (table.n_logits,) + grid.dims:
        raise ValueError(f"logits shape {tuple(y.shape)} does not match grid/table")
    probs = torch.softmax(y, dim=0).numpy()
    return VoxelGrid(np.argmax(probs, axis=0).astype(np.uint8), grid, table)


def _fork_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(seed), stream]).generate_state(1)[0])


class SSCNet(nn.Module):
    """Point branch (+ optional image branch) feeding the fusion U-Net.

    Teacher and student are both instances of this class; they differ in
    ``point_kind``, ``use_camera`` and whether residual adapters are
    attached.  Sub-networks initialize from separate seed streams so that
    e.g. a stage-0 model and a camera-free model start identical.
    """

    def __init__(self, params: ModelParams, grid: GridConfig, table: LabelTable, point_kind: str,
                 use_camera: bool, adapter_scales: Sequence[int] = (), seed: int = 0):
        super().__init__()
        self.params = params
        self.grid = grid
        self.table = table
        self.point_kind = point_kind
        self.use_camera = use_camera
        self.adapter_scales = tuple(sorted(adapter_scales))
        ch = params.fusion.channels
        with torch.random.fork_rng():
            torch.manual_seed(_fork_seed(seed, 0))
            self.point = PointBranch(point_kind, params.point, table.n_classes)
            self.fusion = FusionNet(ch, table.n_logits, grid.dims[0], params.fusion.stages)
        self.image = None
        if use_camera:
            with torch.random.fork_rng():
                torch.manual_seed(_fork_seed(seed, 1))
                self.image = ImageBranch(params.image)
        self.adapters = None
        if self.adapter_scales:
            with torch.random.fork_rng():
                torch.manual_seed(_fork_seed(seed, 2))
                self.adapters = nn.ModuleDict({str(i): ResidualAdapter(ch[i], ch[i]) for i in self.adapter_scales})
        self.replace_with_residual = True

    @property
    def camera_active(self) -> bool:
        return self.image is not None and self.params.fusion.stages > 0

    def forward(self, pillars, images=None, geometries=None, flips=None):
        point_feats, aux = self.point(pillars)
        cam_feats, log_depth = None, None
        if self.camera_active:
            if images is None:
                raise ValueError("camera model called without images")
            cam_feats, log_depth = self.image(images, geometries, flips)
        y, taps, projs = self.fusion(point_feats, cam_feats, self.adapters, self.replace_with_residual)
        return {"logits": y, "taps": taps, "proj": projs, "aux": aux, "log_depth": log_depth}

    def architecture_description(self) -> str:
        """Module-type tree of the shared fusion path (widths excluded)."""
        lines = []
        for name, mod in self.fusion.named_modules():
            lines.append(f"{name}:{type(mod).__name__}")
        for name, mod in self.point.named_modules():
            lines.append(f"point.{name}:{type(mod).__name__}")
        if self.image is not None:
            for name, mod in self.image.named_modules():
                lines.append(f"image.{name}:{type(mod).__name__}")
        return "\n".join(lines)

    def architecture_checksum(self) -> str:
        return hashlib.sha256(self.architecture_description().encode()).hexdigest()


def fusion_forward(point_feats, camera_feats, fusion: FusionNet, adapters=None):
    """Single-sample convenience wrapper returning ``(logits, taps)``."""
    add = point_feats[0].dim() == 3
    pf = [f[None] for f in point_feats] if add else point_feats
    cf = None
    if camera_feats is not None:
        cf = [f[None] for f in camera_feats] if add else camera_feats
    y, taps, _ = fusion(pf, cf, adapters)
    if add:
        return y[0], [t[0] for t in taps]
    return y, taps
