"""Occupancy IoU, semantic mIoU and range / condition breakdowns.

Ratios are taken on counts summed over the dataset (micro averaging);
``macro=True`` averages per-sample ratios instead.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .grid import CONDITION_TAGS, ConfigError, GridConfig, LabelTable, VoxelGrid, tag_key

RANGE_PRESETS = {
    "paper": ((0.0, 20.0), (20.0, 30.0), (30.0, 50.0)),
}


def desk_bands(grid: GridConfig) -> Tuple[Tuple[float, float], ...]:
    """Three bands over the BEV half-extent, the last one open-ended."""
    half = min(grid.x_range[1] - grid.x_range[0], grid.y_range[1] - grid.y_range[0]) / 2
    a, b = round(half / 3, 6), round(2 * half / 3, 6)
    return ((0.0, a), (a, b), (b, math.inf))


@dataclass
class ConfusionCounts:
    """Semantic per-class and binary-occupancy TP / FP / FN counts."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    occ_tp: int = 0
    occ_fp: int = 0
    occ_fn: int = 0
    n_voxels: int = 0

    @classmethod
    def zeros(cls, n_classes: int) -> "ConfusionCounts":
        z = np.zeros(n_classes, dtype=np.int64)
        return cls(z.copy(), z.copy(), z.copy())

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                               self.occ_tp + other.occ_tp, self.occ_fp + other.occ_fp,
                               self.occ_fn + other.occ_fn, self.n_voxels + other.n_voxels)

    def __eq__(self, other):
        return (isinstance(other, ConfusionCounts)
                and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("tp", "fp", "fn"))
                and (self.occ_tp, self.occ_fp, self.occ_fn, self.n_voxels)
                == (other.occ_tp, other.occ_fp, other.occ_fn, other.n_voxels))

    def to_dict(self) -> dict:
        return {"tp": self.tp.tolist(), "fp": self.fp.tolist(), "fn": self.fn.tolist(),
                "occ_tp": self.occ_tp, "occ_fp": self.occ_fp, "occ_fn": self.occ_fn,
                "n_voxels": self.n_voxels}


def _labels(x):
    return x.labels if isinstance(x, VoxelGrid) else np.asarray(x)


def confusion_counts(pred, gt, table: LabelTable = None, ignore: Optional[Iterable[int]] = None,
                     region: Optional[np.ndarray] = None) -> ConfusionCounts:
    """Count agreement between two label volumes.

    Voxels whose ground truth is noise (or in ``ignore``) are excluded, as
    are voxels outside the optional boolean ``region``.  For occupancy, any
    semantic class counts as occupied.
    """
    if isinstance(gt, VoxelGrid):
        table = table or gt.table
        if isinstance(pred, VoxelGrid) and (pred.grid != gt.grid or pred.table != gt.table):
            raise ValueError("prediction and ground truth use different grids or label tables")
    if table is None:
        raise ValueError("a label table is required for raw arrays")
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    valid = np.ones(g.shape, dtype=bool) if region is None else np.broadcast_to(region, g.shape).copy()
    skip = list(ignore) if ignore is not None else ([table.noise_id] if table.noise_id is not None else [])
    for i in skip:
        valid &= g != i
    p = p[valid].astype(np.int64)
    g = g[valid].astype(np.int64)
    L = max(table.valid_ids) + 1
    cm = np.bincount(g * L + p, minlength=L * L).reshape(L, L)  # rows: gt, cols: pred
    sem = np.array(table.semantic_ids)
    tp = cm[sem, sem]
    fp = cm[:, sem].sum(axis=0) - tp
    fn = cm[sem, :].sum(axis=1) - tp
    occ_ids = list(sem)
    gt_occ = np.isin(g, occ_ids)
    pr_occ = np.isin(p, occ_ids)
    return ConfusionCounts(tp, fp, fn, int((gt_occ & pr_occ).sum()), int((~gt_occ & pr_occ).sum()),
                           int((gt_occ & ~pr_occ).sum()), int(valid.sum()))


def _ratio(tp, fp, fn):
    d = tp + fp + fn
    return tp / d if d > 0 else math.nan


def iou_miou(counts: ConfusionCounts):
    """``(IoU, per-class IoU, mIoU)``.

    Classes with no ground truth and no predictions get ``nan`` and are
    left out of the mean.
    """
    iou = _ratio(counts.occ_tp, counts.occ_fp, counts.occ_fn)
    per = [_ratio(int(a), int(b), int(c)) for a, b, c in zip(counts.tp, counts.fp, counts.fn)]
    defined = [v for v in per if not math.isnan(v)]
    miou = float(np.mean(defined)) if defined else math.nan
    return iou, per, miou


def aggregate(counts: Sequence[ConfusionCounts], macro: bool = False) -> dict:
    counts = list(counts)
    if not counts:
        raise ValueError("nothing to aggregate")
    if macro:
        rows = [iou_miou(c) for c in counts]
        per = np.nanmean(np.array([r[1] for r in rows], dtype=float), axis=0)
        return {"iou": float(np.nanmean([r[0] for r in rows])), "per_class": per.tolist(),
                "miou": float(np.nanmean([r[2] for r in rows]))}
    total = sum(counts[1:], counts[0])
    iou, per, miou = iou_miou(total)
    return {"iou": iou, "per_class": per, "miou": miou, "counts": total}


def _check_bands(bands):
    bands = [(float(lo), float(hi)) for lo, hi in bands]
    for lo, hi in bands:
        if not (0 <= lo < hi):
            raise ConfigError(f"band ({lo}, {hi}) must satisfy 0 <= lo < hi")
    for (a0, a1), (b0, b1) in zip(sorted(bands), sorted(bands)[1:]):
        if b0 < a1:
            raise ConfigError(f"bands ({a0}, {a1}) and ({b0}, {b1}) overlap")
    return bands


def pillar_distance(grid: GridConfig) -> np.ndarray:
    """Horizontal distance of each pillar center from the origin, ``(H, W)``."""
    _, H, W = grid.dims
    s = grid.voxel_size
    xs = grid.x_range[0] + (np.arange(W) + 0.5) * s
    ys = grid.y_range[0] + (np.arange(H) + 0.5) * s
    return np.hypot(xs[None, :], ys[:, None])


def range_counts(pred, gt, bands, table: LabelTable = None) -> List[ConfusionCounts]:
    bands = _check_bands(bands)
    grid = gt.grid if isinstance(gt, VoxelGrid) else None
    if grid is None:
        raise ValueError("range breakdown needs VoxelGrid ground truth")
    dist = pillar_distance(grid)
    return [confusion_counts(pred, gt, table, region=((dist >= lo) & (dist < hi))[None])
            for lo, hi in bands]


def range_breakdown(preds, gts, bands) -> List[dict]:
    """Per-band metrics from counts summed over the given samples."""
    if isinstance(gts, VoxelGrid):
        preds, gts = [preds], [gts]
    bands = _check_bands(bands)
    per_band = [ConfusionCounts.zeros(gts[0].table.n_classes) for _ in bands]
    for p, g in zip(preds, gts):
        for k, c in enumerate(range_counts(p, g, bands)):
            per_band[k] = per_band[k] + c
    rows = []
    for (lo, hi), c in zip(bands, per_band):
        iou, per, miou = iou_miou(c)
        rows.append({"band": (lo, hi), "iou": iou, "miou": miou, "per_class": per, "counts": c})
    return rows


def condition_breakdown(counts: Sequence[ConfusionCounts], tags: Sequence[Iterable[str]],
                        by: str = "set") -> Dict[str, dict]:
    """Metrics per tag group from summed counts.

    ``by="set"`` keys rows by the exact tag set (a partition of the
    samples); ``by="tag"`` gives one (overlapping) row per individual tag.
    """
    if len(counts) != len(tags):
        raise ValueError("one tag set per sample is required")
    groups: Dict[str, List[ConfusionCounts]] = {}
    for c, t in zip(counts, tags):
        t = set(t)
        if not t:
            raise ValueError("every sample must carry at least one tag")
        unknown = t - set(CONDITION_TAGS)
        if unknown:
            raise ValueError(f"unknown condition tags {sorted(unknown)}")
        keys = [tag_key(t)] if by == "set" else sorted(t)
        for k in keys:
            groups.setdefault(k, []).append(c)
    return {k: aggregate(v) for k, v in sorted(groups.items())}
