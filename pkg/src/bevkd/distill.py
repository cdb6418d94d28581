"""Cross-modal distillation losses and the overall training objective.

Teacher tensors are detached inside every loss, so no gradient reaches the
teacher whatever the caller passes in.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .grid import ConfigError, LabelTable, VoxelGrid
from .losses import LossValue

EPS = 1e-8


@dataclass(frozen=True)
class KDParams:
    """Distillation configuration.

    ``weights`` are the five objective weights (task, residual alignment,
    relation, prediction distribution, auxiliary point supervision).
    ``brd_resize`` of ``None`` resizes to the smallest tapped plane, capped
    at 16 x 16.
    """

    weights: Tuple[float, float, float, float, float] = (1.0, 1.0, 1.0, 1.0, 1.0)
    cmrd: bool = True
    brd: bool = True
    pdd: bool = True
    cmrd_scales: Tuple[int, ...] = (0, 1, 2)
    brd_scales: Tuple[int, ...] = (0, 2, 3)
    brd_resize: Optional[Tuple[int, int]] = None
    kl_reverse: bool = False
    cmrd_replace: bool = True
    allow_brd_without_camera: bool = False

    def __post_init__(self):
        if len(self.weights) != 5:
            raise ConfigError("weights must hold 5 values")
        if any(not np.isfinite(w) or w < 0 for w in self.weights):
            raise ConfigError(f"weights must be finite and >= 0, got {self.weights}")
        if not set(self.cmrd_scales) <= {0, 1, 2}:
            raise ConfigError("cmrd_scales must be a subset of {0, 1, 2}")
        if not set(self.brd_scales) <= {0, 1, 2, 3}:
            raise ConfigError("brd_scales must be a subset of {0, 1, 2, 3}")

    def resize_for(self, plane_shapes: Sequence[Tuple[int, int]]) -> Tuple[int, int]:
        smallest = min(plane_shapes)
        if self.brd_resize is None:
            return (min(16, smallest[0]), min(16, smallest[1]))
        r = tuple(self.brd_resize)
        if r[0] > smallest[0] or r[1] > smallest[1]:
            raise ConfigError(f"brd_resize {r} exceeds the smallest tapped plane {smallest}")
        return r

    def check_student(self, uses_camera: bool) -> None:
        if self.brd and self.weights[2] > 0 and not uses_camera and not self.allow_brd_without_camera:
            raise ConfigError("relation distillation is only used for camera-fed students; "
                              "set allow_brd_without_camera to override")

    @property
    def enabled(self) -> bool:
        w = self.weights
        return (self.cmrd and w[1] > 0) or (self.brd and w[2] > 0) or (self.pdd and w[3] > 0)


@dataclass(frozen=True)
class OccupancyMask:
    mask: np.ndarray  # (H_i, W_i) bool
    scale: int


def occupancy_mask_tensor(gt, table: LabelTable, scale: int = 0):
    """``(B, Z, H, W)`` labels to ``(B, H/2^s, W/2^s)`` boolean pillar occupancy."""
    if scale not in (0, 1, 2, 3):
        raise ValueError(f"scale must be in 0..3, got {scale}")
    gt = torch.as_tensor(gt)
    occ = gt != table.empty_id
    if table.noise_id is not None:
        occ &= gt != table.noise_id
    m = occ.any(dim=-3)
    if scale:
        k = 2 ** scale
        m = F.max_pool2d(m[:, None].to(torch.float32), k, k)[:, 0] > 0
    return m


def build_occupancy_mask(gt: VoxelGrid, scale: int = 0) -> OccupancyMask:
    m = occupancy_mask_tensor(torch.from_numpy(np.array(gt.labels))[None], gt.table, scale)[0]
    return OccupancyMask(m.numpy(), scale)


def _batch(x):
    return x[None] if x.dim() == 3 else x


def _unit(f):
    """Normalize along channels; zero vectors stay zero."""
    return f / f.norm(dim=1, keepdim=True).clamp_min(EPS)


def cmrd_alignment(proj, teacher, mask):
    """Mean of ``1 - cos(proj, teacher)`` over masked positions (0 if none)."""
    proj, teacher = _batch(proj), _batch(teacher).detach()
    mask = torch.as_tensor(mask)
    if mask.dim() == 2:
        mask = mask[None]
    if proj.shape[-2:] != teacher.shape[-2:] or mask.shape[-2:] != proj.shape[-2:]:
        raise ValueError("student, teacher and mask planes must match")
    cos = (_unit(proj) * _unit(teacher)).sum(dim=1)
    m = mask.to(torch.bool)
    n = m.sum()
    if n == 0:
        return cos.sum() * 0.0
    return (1.0 - cos[m]).sum() / n


def cmrd_loss(student, teacher, mask, adapter):
    """Project, align and residually re-inject one student map.

    Returns ``(loss, F_s_star)`` where ``F_s_star = F_s + gate * MLP(F_s)``.
    """
    s = _batch(student)
    f_star, proj = adapter(s)
    loss = cmrd_alignment(proj, teacher, mask)
    return loss, (f_star[0] if student.dim() == 3 else f_star)


def affinity_matrix(feat):
    """``K x K`` cosine affinity of the flattened ``(C, H, W)`` positions.

    Zero-norm positions get an all-zero row, column and diagonal entry.
    Batched input ``(B, C, H, W)`` gives ``(B, K, K)``.
    """
    f = _batch(feat).flatten(2)  # (B, C, K)
    u = f / f.norm(dim=1, keepdim=True).clamp_min(EPS)
    a = u.transpose(1, 2) @ u
    return a[0] if feat.dim() == 3 else a


def brd_loss(student, teacher, resize: Tuple[int, int]):
    """Mean absolute difference of student and teacher affinity matrices."""
    s, t = _batch(student), _batch(teacher).detach()
    size = tuple(resize)
    if s.shape[-2:] != size:
        s = F.interpolate(s, size=size, mode="bilinear", align_corners=False, antialias=False)
    if t.shape[-2:] != size:
        t = F.interpolate(t, size=size, mode="bilinear", align_corners=False, antialias=False)
    return (affinity_matrix(s) - affinity_matrix(t)).abs().mean()


def pdd_loss(student_logits, teacher_logits, reverse: bool = False):
    """Voxel-mean ``KL(softmax(Y_s) || softmax(Y_t))`` over the class axis.

    Inputs are ``(B, C_n+1, Z, H, W)`` views (or unbatched); ``reverse``
    swaps the arguments of the divergence.
    """
    ys = student_logits if student_logits.dim() == 5 else student_logits[None]
    yt = (teacher_logits if teacher_logits.dim() == 5 else teacher_logits[None]).detach()
    if ys.shape != yt.shape:
        raise ValueError("student and teacher logits differ in shape")
    ls, lt = torch.log_softmax(ys, dim=1), torch.log_softmax(yt, dim=1)
    if reverse:
        kl = (lt.exp() * (lt - ls)).sum(dim=1)
    else:
        kl = (ls.exp() * (ls - lt)).sum(dim=1)
    return kl.mean()


def total_loss(task: LossValue, cmrd, brd, pdd, aux: Tuple, weights=(1, 1, 1, 1, 1),
               extra: Optional[Dict[str, torch.Tensor]] = None) -> LossValue:
    """Weighted objective; ``extra`` terms (e.g. depth supervision) enter with weight 1.

    Missing terms may be passed as ``None`` and count as 0.
    """
    l1, l2, l3, l4, l5 = (float(w) for w in weights)
    ref = task.value

    def z(x):
        return ref * 0.0 if x is None else x

    l_c, l_s = (None, None) if aux is None else aux
    comps = {
        "bev": l1 * task.value,
        "cmrd": l2 * z(cmrd),
        "brd": l3 * z(brd),
        "pdd": l4 * z(pdd),
        "aux": l5 * (z(l_c) + z(l_s)),
    }
    for k, v in (extra or {}).items():
        comps[k] = v
    value = sum(comps.values())
    return LossValue(value, comps, task.warnings)
