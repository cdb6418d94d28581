import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from bevkd.grid import ConfigError, GridConfig, PointCloud, world_to_voxel
from bevkd.models.params import FusionParams, ModelParams, PointBranchParams
from bevkd.models.point_branch import (
    LIDAR_FEATURES,
    RADAR_FEATURES,
    BEVEncoder,
    PointBranch,
    encode_point_bev,
    pillarize,
)

GRID = GridConfig.tiny()


def random_cloud(rng, kind, n, grid=GRID, spill=0.2):
    lo = np.array([grid.x_range[0], grid.y_range[0], grid.z_range[0]])
    hi = np.array([grid.x_range[1], grid.y_range[1], grid.z_range[1]])
    span = hi - lo
    xyz = lo - spill * span + rng.random((n, 3)) * span * (1 + 2 * spill)
    if kind == "lidar":
        return PointCloud("lidar", xyz)
    extra = np.column_stack([rng.normal(size=n), rng.normal(size=(n, 2)) * (rng.random((n, 1)) < 0.7)])
    return PointCloud("radar", np.column_stack([xyz, extra]))


def pillar_loop(cloud, grid):
    _, H, W = grid.dims
    C = len(RADAR_FEATURES if cloud.kind == "radar" else LIDAR_FEATURES)
    cells = {}
    z0, z1 = grid.z_range
    for p in cloud.points.astype(np.float64):
        idx = world_to_voxel(p[None, :3], grid)[0]
        if idx[0] < 0:
            continue
        cells.setdefault((idx[1], idx[2]), []).append(p)
    out = np.zeros((C, H, W))
    for (h, w), pts in cells.items():
        n = len(pts)
        zs = [(p[2] - z0) / (z1 - z0) for p in pts]
        out[0, h, w] = math.log1p(n)
        out[1, h, w] = sum(zs) / n
        out[2, h, w] = max(zs)
        if cloud.kind == "radar":
            sp = [math.hypot(p[4], p[5]) for p in pts]
            out[3, h, w] = sum(p[3] for p in pts) / n
            out[4, h, w] = sum(sp) / n
            out[5, h, w] = sum(p[4] / s if s > 0 else 0.0 for p, s in zip(pts, sp)) / n
            out[6, h, w] = sum(p[5] / s if s > 0 else 0.0 for p, s in zip(pts, sp)) / n
    return out


@pytest.mark.parametrize("kind", ["lidar", "radar"])
@pytest.mark.parametrize("seed", range(5))
def test_pillarize_matches_loop(kind, seed):
    cloud = random_cloud(np.random.default_rng(seed), kind, 300)
    got = pillarize(cloud, GRID)
    assert got.scale_index == 0
    assert np.allclose(got.data, pillar_loop(cloud, GRID), atol=1e-5)


def test_empty_cloud_gives_zero_map():
    m = pillarize(PointCloud("radar", np.zeros((0, 6))), GRID)
    assert m.data.shape == (len(RADAR_FEATURES),) + GRID.dims[1:]
    assert not m.data.any()


def test_single_point():
    x, y, z = 0.11, -0.31, -0.5
    m = pillarize(PointCloud("lidar", [[x, y, z]]), GRID).data
    idx = world_to_voxel(np.array([[x, y, z]]), GRID)[0]
    assert np.count_nonzero(m[0]) == 1
    zn = (z - GRID.z_range[0]) / (GRID.z_range[1] - GRID.z_range[0])
    assert m[0, idx[1], idx[2]] == pytest.approx(math.log(2))
    assert m[1, idx[1], idx[2]] == pytest.approx(zn) == pytest.approx(m[2, idx[1], idx[2]])


def test_radar_opposite_headings_average_magnitudes():
    pts = [[0.1, 0.1, -0.5, 1.0, 1.0, 0.0], [0.12, 0.1, -0.5, 3.0, -1.0, 0.0]]
    m = pillarize(PointCloud("radar", pts), GRID).data
    idx = world_to_voxel(np.array([[0.1, 0.1, -0.5]]), GRID)[0]
    cell = m[:, idx[1], idx[2]]
    assert cell[3] == pytest.approx(2.0)
    assert cell[4] == pytest.approx(1.0)
    assert cell[5] == pytest.approx(0.0) and cell[6] == pytest.approx(0.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(["lidar", "radar"]))
def test_pillarize_order_invariant(seed, kind):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, kind, 120)
    perm = PointCloud(kind, cloud.points[rng.permutation(len(cloud))])
    assert np.array_equal(pillarize(cloud, GRID).data, pillarize(perm, GRID).data)


def test_translation_by_one_pillar_shifts_map():
    rng = np.random.default_rng(3)
    s = GRID.voxel_size
    _, H, W = GRID.dims
    h = rng.integers(0, H, 50)
    w = rng.integers(0, W - 1, 50)
    x = GRID.x_range[0] + (w + 0.3 + 0.4 * rng.random(50)) * s
    y = GRID.y_range[0] + (h + 0.3 + 0.4 * rng.random(50)) * s
    z = GRID.z_range[0] + rng.random(50) * 0.9 * (GRID.z_range[1] - GRID.z_range[0])
    a = pillarize(PointCloud("lidar", np.column_stack([x, y, z])), GRID).data
    b = pillarize(PointCloud("lidar", np.column_stack([x + s, y, z])), GRID).data
    assert np.allclose(b[:, :, 1:], a[:, :, :-1], atol=1e-6)
    assert not b[:, :, 0].any()


def test_zero_input_zero_bias_gives_zero_features():
    torch.manual_seed(0)
    branch = PointBranch("radar", PointBranchParams(channels=(4, 6, 8)), 5)
    for name, p in branch.named_parameters():
        if name.endswith("bias"):
            torch.nn.init.zeros_(p)
    feats, aux = encode_point_bev(torch.zeros(len(RADAR_FEATURES), 16, 16), branch)
    assert all(not f.any() for f in feats)
    assert not aux["occupancy"].any()


def test_output_shapes():
    torch.manual_seed(0)
    branch = PointBranch("lidar", PointBranchParams(channels=(4, 6, 8)), 5)
    feats, aux = branch(torch.randn(2, 3, 16, 16))
    assert [tuple(f.shape) for f in feats] == [(2, 4, 16, 16), (2, 6, 8, 8), (2, 8, 4, 4)]
    assert aux["occupancy"].shape == (2, 16, 16) and aux["semantic"].shape == (2, 5, 16, 16)


def test_channel_mismatches_raise():
    with pytest.raises(ConfigError):
        ModelParams(point=PointBranchParams(channels=(8, 8, 8)), fusion=FusionParams(channels=(16, 24, 32)))
    enc = BEVEncoder(3, (4, 6, 8), (1, 1, 1))
    with pytest.raises(ConfigError):
        enc(torch.zeros(1, 7, 16, 16))
    with pytest.raises(ConfigError):
        enc(torch.zeros(1, 3, 18, 18))
