"""Procedural scenes and the LiDAR / radar / camera simulators.

Every sensor draws from its own RNG stream spawned from the scene seed, so
changing a condition tag only perturbs the sensors that tag degrades.
"""
from __future__ import annotations

import math
from typing import Iterable, Optional

import numpy as np

from ..grid import (
    CameraBundle,
    ConfigError,
    PointCloud,
    SceneObject,
    SceneSample,
    VoxelGrid,
    voxel_center,
)
from .config import WorldConfig
from .raycast import cast_rays

# streams spawned from the scene seed
_GEOMETRY, _TAGS, _LIDAR, _RADAR, _CAMERA = range(5)
_SURFACE_NUDGE = 1e-4

_PALETTE = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.5, 0.5, 0.5],
        [0.9, 0.1, 0.1],
        [0.95, 0.85, 0.1],
        [0.1, 0.7, 0.2],
        [0.2, 0.3, 0.9],
        [1.0, 1.0, 1.0],
    ]
)


def _streams(seed: int):
    ss = np.random.SeedSequence(int(seed))
    return [np.random.default_rng(s) for s in ss.spawn(5)]


def class_colors(n_labels: int) -> np.ndarray:
    if n_labels <= len(_PALETTE):
        return _PALETTE[:n_labels]
    extra = n_labels - len(_PALETTE)
    hues = np.linspace(0, 1, extra, endpoint=False)
    ext = np.stack([0.5 + 0.5 * np.cos(2 * np.pi * (hues + k / 3)) for k in range(3)], axis=1)
    return np.concatenate([_PALETTE, ext])


def _centers(cfg: WorldConfig):
    g = cfg.grid
    Z, H, W = g.dims
    s = g.voxel_size
    xs = g.x_range[0] + (np.arange(W) + 0.5) * s
    ys = g.y_range[0] + (np.arange(H) + 0.5) * s
    zs = g.z_range[0] + (np.arange(Z) + 0.5) * s
    return xs, ys, zs


def rasterize(obj: SceneObject, cfg: WorldConfig) -> np.ndarray:
    """Boolean ``(Z, H, W)`` mask of voxels whose centers lie inside ``obj``."""
    xs, ys, zs = _centers(cfg)
    cx, cy = obj.center
    if obj.shape == "box":
        sx, sy, h = obj.size
        foot = ((ys[:, None] >= cy - sy / 2) & (ys[:, None] < cy + sy / 2)
                & (xs[None, :] >= cx - sx / 2) & (xs[None, :] < cx + sx / 2))
    else:
        r, _, h = obj.size
        foot = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2 < r * r
    zmask = (zs >= cfg.ground_height) & (zs < cfg.ground_height + h)
    return zmask[:, None, None] & foot[None, :, :]


def instance_map(objects: Iterable[SceneObject], cfg: WorldConfig) -> np.ndarray:
    inst = np.full(cfg.grid.dims, -1, dtype=np.int32)
    for k, obj in enumerate(objects):
        inst[rasterize(obj, cfg)] = k
    return inst


def _place_objects(rng: np.random.Generator, cfg: WorldConfig):
    g = cfg.grid
    table = cfg.table
    taken = np.zeros(g.bev_shape(0), dtype=bool)
    xs, ys, _ = _centers(cfg)
    near_origin = xs[None, :] ** 2 + ys[:, None] ** 2 < cfg.keep_out_radius ** 2
    objects = []
    for name in table.class_names:
        spec = cfg.objects.get(name)
        if spec is None:
            continue
        lo, hi = spec.count
        n = int(rng.integers(lo, hi + 1))
        label = table.class_id(name)
        for _ in range(n):
            for _attempt in range(500):
                a = float(rng.uniform(*spec.footprint))
                h = float(rng.uniform(*spec.height))
                if spec.shape == "box":
                    b = a * float(rng.uniform(*spec.aspect))
                    sx, sy = (a, b) if rng.random() < 0.5 else (b, a)
                    size = (sx, sy, h)
                    half = (sx / 2, sy / 2)
                else:
                    size = (a, a, h)
                    half = (a, a)
                cx = float(rng.uniform(g.x_range[0] + half[0], g.x_range[1] - half[0]))
                cy = float(rng.uniform(g.y_range[0] + half[1], g.y_range[1] - half[1]))
                speed = float(rng.uniform(*spec.speed))
                heading = float(rng.uniform(0, 2 * np.pi))
                vel = (speed * math.cos(heading), speed * math.sin(heading)) if speed > 0 else (0.0, 0.0)
                obj = SceneObject(label, spec.shape, (cx, cy), size, vel)
                foot = rasterize(obj, cfg).any(axis=0)
                if not foot.any():
                    continue
                grown = foot.copy()
                grown[1:] |= foot[:-1]
                grown[:-1] |= foot[1:]
                grown[:, 1:] |= foot[:, :-1]
                grown[:, :-1] |= foot[:, 1:]
                if (grown & taken).any() or (foot & near_origin).any():
                    continue
                taken |= foot
                objects.append(obj)
                break
            else:
                raise ConfigError(f"could not place a {name} object; grid too crowded")
    return objects


def build_ground_truth(objects, cfg: WorldConfig, rng: Optional[np.random.Generator] = None):
    g = cfg.grid
    table = cfg.table
    _, _, zs = _centers(cfg)
    labels = np.zeros(g.dims, dtype=np.uint8)
    labels[zs < cfg.ground_height] = table.class_id(cfg.ground_class)
    for obj in objects:
        labels[rasterize(obj, cfg)] = obj.label
    if rng is not None and table.noise_id is not None:
        lo, hi = cfg.noise_voxels
        n = int(rng.integers(lo, hi + 1))
        free = np.flatnonzero((labels == table.empty_id).ravel())
        if n and len(free):
            xyz = voxel_center(np.stack(np.unravel_index(free, g.dims), axis=1), g)
            free = free[xyz[:, 0] ** 2 + xyz[:, 1] ** 2 >= cfg.keep_out_radius ** 2]
            pick = rng.choice(free, size=min(n, len(free)), replace=False)
            labels.ravel()[np.sort(pick)] = table.noise_id
    return labels


def sample_tags(rng: np.random.Generator, cfg: WorldConfig) -> frozenset:
    rain = rng.random() < cfg.conditions.p_rain
    night = rng.random() < cfg.conditions.p_night
    tags = {"rain" if rain else "sun"}
    if night:
        tags.add("night")
    return frozenset(tags)


def generate_scene(seed: int, cfg: WorldConfig, tags: Optional[Iterable[str]] = None) -> SceneSample:
    """Deterministic scene for ``seed``; ``tags`` overrides the sampled conditions."""
    cfg.validate()
    rngs = _streams(seed)
    objects = _place_objects(rngs[_GEOMETRY], cfg)
    labels = build_ground_truth(objects, cfg, rngs[_GEOMETRY])
    gt = VoxelGrid(labels, cfg.grid, cfg.table)
    sampled = sample_tags(rngs[_TAGS], cfg)
    tags = frozenset(tags) if tags is not None else sampled
    base = SceneSample(gt, PointCloud("lidar", np.zeros((0, 3))), PointCloud("radar", np.zeros((0, 6))),
                       _empty_bundle(cfg), tags, int(seed), tuple(objects))
    lidar = simulate_lidar(base, cfg)
    radar = simulate_radar(base, cfg)
    cams = simulate_camera_views(base, cfg)
    return SceneSample(gt, lidar, radar, cams, tags, int(seed), tuple(objects))


def _empty_bundle(cfg: WorldConfig) -> CameraBundle:
    h, w = cfg.camera.image_size
    v = cfg.camera.num_views
    K, T = camera_calibration(cfg)
    return CameraBundle(np.zeros((v, 3, h, w)), K, T, np.zeros((v, h, w)))


def lidar_rays(cfg: WorldConfig):
    lc = cfg.lidar
    elev = np.deg2rad(np.linspace(lc.elevation_deg[0], lc.elevation_deg[1], lc.beams))
    az = np.arange(lc.points_per_beam) * (2 * np.pi / lc.points_per_beam)
    e, a = np.meshgrid(elev, az, indexing="ij")
    dirs = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1).reshape(-1, 3)
    origin = np.array([0.0, 0.0, lc.height])
    return origin, dirs


def surface_hits(scene: SceneSample, cfg: WorldConfig):
    """Noise-free LiDAR returns for every ray: points, hit voxel index, range."""
    origin, dirs = lidar_rays(cfg)
    occ = scene.gt.labels != cfg.table.empty_id
    t, idx = cast_rays(occ, cfg.grid, origin, dirs, cfg.lidar.max_range)
    ok = np.isfinite(t) & (t <= cfg.lidar.max_range)
    pts = origin + (t[ok, None] + _SURFACE_NUDGE) * dirs[ok]
    return pts, idx[ok], ok


def simulate_lidar(scene: SceneSample, cfg: WorldConfig) -> PointCloud:
    rng = _streams(scene.seed)[_LIDAR]
    pts, _, ok = surface_hits(scene, cfg)
    drop = cfg.lidar.dropout
    if "rain" in scene.tags:
        drop = 1.0 - (1.0 - drop) * (1.0 - cfg.conditions.rain_lidar_dropout)
    # one draw per ray, hit or not, so the stream does not depend on geometry
    keep = rng.random(len(ok)) >= drop
    return PointCloud("lidar", pts[keep[ok]])


def detection_probability(r: np.ndarray, cfg: WorldConfig) -> np.ndarray:
    curve = np.asarray(cfg.radar.detection_curve, dtype=np.float64)
    return np.interp(r, curve[:, 0], curve[:, 1])


def simulate_radar(scene: SceneSample, cfg: WorldConfig) -> PointCloud:
    rc = cfg.radar
    table = cfg.table
    rng = _streams(scene.seed)[_RADAR]
    pts, idx, _ = surface_hits(scene, cfg)
    labels = scene.gt.labels[idx[:, 0], idx[:, 1], idx[:, 2]] if len(idx) else np.zeros(0, np.uint8)
    usable = labels != table.empty_id
    if table.noise_id is not None:
        usable &= labels != table.noise_id
    if not rc.include_ground:
        usable &= labels != table.class_id(cfg.ground_class)
    r = np.hypot(pts[:, 0], pts[:, 1])
    p_det = detection_probability(r, cfg)
    detected = usable & (rng.random(len(pts)) < p_det)
    cand = np.flatnonzero(detected)
    if len(cand) > rc.budget:
        cand = np.sort(rng.choice(cand, size=rc.budget, replace=False))
    n = len(cand)
    if n == 0:
        return PointCloud("radar", np.zeros((0, 6)))
    inst = instance_map(scene.objects, cfg)
    hit = idx[cand]
    owner = inst[hit[:, 0], hit[:, 1], hit[:, 2]]
    vel = np.array([scene.objects[k].velocity if k >= 0 else (0.0, 0.0) for k in owner], dtype=np.float64)
    rcs_mean = np.zeros(table.n_labels)
    rcs_std = np.zeros(table.n_labels)
    for name, spec in cfg.objects.items():
        cid = table.class_id(name)
        rcs_mean[cid], rcs_std[cid] = spec.rcs_mean, spec.rcs_std
    lab = labels[cand]
    xyz = pts[cand] + rng.normal(0.0, 1.0, (n, 3)) * rc.position_noise
    v = vel + rng.normal(0.0, 1.0, (n, 2)) * rc.velocity_noise
    rcs = rcs_mean[lab] + rng.normal(0.0, 1.0, n) * rcs_std[lab]
    return PointCloud("radar", np.column_stack([xyz, rcs, v]))


def camera_calibration(cfg: WorldConfig):
    cc = cfg.camera
    h, w = cc.image_size
    f = (w / 2.0) / math.tan(math.radians(cc.fov_deg) / 2.0)
    K = np.array([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]])
    pitch = math.radians(cc.pitch_deg)
    Ks, Ts = [], []
    for v in range(cc.num_views):
        yaw = 2 * math.pi * v / cc.num_views
        fwd = np.array([math.cos(yaw) * math.cos(pitch), math.sin(yaw) * math.cos(pitch), -math.sin(pitch)])
        right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
        down = np.cross(fwd, right)
        T = np.eye(4)
        T[:3, :3] = np.stack([right, down, fwd], axis=1)
        T[:3, 3] = (0.0, 0.0, cc.height)
        Ks.append(K)
        Ts.append(T)
    return np.stack(Ks), np.stack(Ts)


def pixel_rays(K: np.ndarray, T: np.ndarray, h: int, w: int, stride: float = 1.0):
    """Unit world-frame rays through the centers of an ``(h, w)`` pixel lattice.

    ``stride`` > 1 addresses a downsampled lattice whose cell ``(i, j)``
    covers full-resolution pixels ``[stride*j, stride*(j+1))``.
    """
    u = (np.arange(w) + 0.5) * stride
    v = (np.arange(h) + 0.5) * stride
    uu, vv = np.meshgrid(u, v)
    pix = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    cam = pix @ np.linalg.inv(K).T
    world = cam @ T[:3, :3].T
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def simulate_camera_views(scene: SceneSample, cfg: WorldConfig) -> CameraBundle:
    cc = cfg.camera
    cond = cfg.conditions
    h, w = cc.image_size
    K, T = camera_calibration(cfg)
    occ = scene.gt.labels != cfg.table.empty_id
    colors = class_colors(cfg.table.n_labels)
    images = np.empty((cc.num_views, 3, h, w))
    depth = np.zeros((cc.num_views, h, w))
    for v in range(cc.num_views):
        dirs = pixel_rays(K[v], T[v], h, w).reshape(-1, 3)
        t, idx = cast_rays(occ, cfg.grid, T[v, :3, 3], dirs, cc.max_range)
        hit = np.isfinite(t)
        img = np.full((h * w, 3), cc.background)
        lab = scene.gt.labels[idx[hit, 0], idx[hit, 1], idx[hit, 2]]
        img[hit] = colors[lab]
        d = np.zeros(h * w)
        d[hit] = t[hit]
        img = img.reshape(h, w, 3).transpose(2, 0, 1)
        if "rain" in scene.tags:
            a = cond.rain_camera_fog
            img = (1.0 - a) * img + a * cond.fog_level
        if "night" in scene.tags:
            mu = img.mean()
            img = mu + cond.night_contrast * (img - mu)
        images[v] = img
        depth[v] = d.reshape(h, w)
    return CameraBundle(images, K, T, depth)
