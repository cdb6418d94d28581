"""Exact voxel traversal (Amanatides & Woo), vectorized over rays."""
from __future__ import annotations

import numpy as np

from ..grid import GridConfig, world_to_voxel


def cast_rays(occupied: np.ndarray, grid: GridConfig, origins, directions, max_range: float):
    """First occupied voxel along each ray.

    ``occupied`` is a boolean ``(Z, H, W)`` volume; ``directions`` must be
    unit vectors; origins must lie inside the grid.  Returns ``(t, index)``
    where ``t`` is the entry distance (``inf`` on a miss) and ``index`` is
    the ``(z, h, w)`` of the hit voxel (``-1`` rows on a miss).
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    n = len(d)
    o = np.broadcast_to(o, (n, 3))
    dims = np.array(grid.dims)[::-1]  # (W, H, Z) to go with xyz columns
    lo = grid.lower[::-1]
    s = grid.voxel_size

    start = world_to_voxel(o, grid)
    if (start < 0).any():
        raise ValueError("ray origins must lie inside the grid")
    cell = start[:, ::-1].copy()  # xyz order

    step = np.where(d > 0, 1, np.where(d < 0, -1, 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(d != 0, 1.0 / d, np.inf)
        bound = lo + (cell + (step > 0)) * s
        t_max = np.where(d != 0, (bound - o) * inv, np.inf)
        t_delta = np.where(d != 0, s * np.abs(inv), np.inf)

    t_hit = np.full(n, np.inf)
    hit_idx = np.full((n, 3), -1, dtype=np.int64)
    t_entry = np.zeros(n)
    active = np.ones(n, dtype=bool)
    max_steps = int(dims.sum()) + 3
    for _ in range(max_steps):
        if not active.any():
            break
        a = np.nonzero(active)[0]
        c = cell[a]
        occ = occupied[c[:, 2], c[:, 1], c[:, 0]]
        hits = a[occ]
        t_hit[hits] = t_entry[hits]
        hit_idx[hits] = cell[hits][:, ::-1]
        active[hits] = False
        a = a[~occ]
        if len(a) == 0:
            break
        axis = np.argmin(t_max[a], axis=1)
        t_entry[a] = t_max[a, axis]
        cell[a, axis] += step[a, axis]
        t_max[a, axis] += t_delta[a, axis]
        out = ((cell[a] < 0) | (cell[a] >= dims)).any(axis=1) | (t_entry[a] > max_range)
        active[a[out]] = False
    return t_hit, hit_idx


def march_ray(occupied: np.ndarray, grid: GridConfig, origin, direction, max_range: float,
              step: float = None) -> float:
    """Fixed-step scalar ray march; an independent reference for ``cast_rays``.

    Returns the first sampled distance inside an occupied voxel, or ``inf``.
    Accurate to ``step`` (default voxel_size / 50).
    """
    step = step or grid.voxel_size / 50.0
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    t = 0.0
    while t <= max_range:
        idx = world_to_voxel(o + t * d, grid)
        if idx is None:
            return np.inf
        if occupied[idx]:
            return t
        t += step
    return np.inf
