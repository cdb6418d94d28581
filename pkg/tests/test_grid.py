import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevkd.grid import (
    BEVFeatureMap,
    CameraBundle,
    ConfigError,
    GridConfig,
    LabelTable,
    PointCloud,
    VoxelGrid,
    voxel_center,
    world_to_voxel,
)

from oracles import world_to_voxel_loop


def test_paper_preset_dims():
    g = GridConfig.paper()
    assert g.dims == (40, 512, 512)
    assert g.x_range == (-51.2, 51.2) and g.z_range == (-5.0, 3.0) and g.voxel_size == 0.2


def test_desk_default_dims():
    assert GridConfig().dims == (16, 64, 64)
    assert GridConfig.small().dims == (8, 32, 32)
    assert GridConfig.tiny().dims == (8, 16, 16)


def test_lower_corner_maps_to_origin_index():
    assert world_to_voxel((-51.2, -51.2, -5.0), GridConfig.paper()) == (0, 0, 0)


def test_upper_bound_is_exclusive():
    assert world_to_voxel((51.2, 0.0, 0.0), GridConfig.paper()) is None
    assert world_to_voxel((0.0, 51.2, 0.0), GridConfig.paper()) is None
    assert world_to_voxel((0.0, 0.0, 3.0), GridConfig.paper()) is None


def test_small_offsets_against_loop():
    g = GridConfig.paper()
    p = (0.05, -0.05, -0.05)
    lo = (g.z_range[0], g.y_range[0], g.x_range[0])
    assert world_to_voxel(p, g) == world_to_voxel_loop((p[2], p[1], p[0]), lo, 0.2, g.dims)


def test_vectorized_matches_loop_random():
    rng = np.random.default_rng(0)
    g = GridConfig()
    pts = rng.uniform(-7, 7, size=(500, 3))
    pts[:, 2] = rng.uniform(-1.5, 2.5, size=500)
    idx = world_to_voxel(pts, g)
    lo = (g.z_range[0], g.y_range[0], g.x_range[0])
    for p, i in zip(pts, idx):
        ref = world_to_voxel_loop((p[2], p[1], p[0]), lo, g.voxel_size, g.dims)
        assert (tuple(i) == ref) if ref is not None else (i == -1).all()


@st.composite
def grids(draw):
    s = draw(st.sampled_from([0.1, 0.2, 0.25, 0.5]))
    nx, ny, nz = (draw(st.integers(1, 12)) for _ in range(3))
    x0 = draw(st.integers(-20, 0)) * s
    y0 = draw(st.integers(-20, 0)) * s
    z0 = draw(st.integers(-10, 0)) * s
    return GridConfig((x0, x0 + nx * s), (y0, y0 + ny * s), (z0, z0 + nz * s), s)


@settings(max_examples=60, deadline=None)
@given(grids(), st.data())
def test_center_roundtrip(g, data):
    Z, H, W = g.dims
    idx = (data.draw(st.integers(0, Z - 1)), data.draw(st.integers(0, H - 1)), data.draw(st.integers(0, W - 1)))
    assert world_to_voxel(voxel_center(idx, g), g) == idx


@settings(max_examples=40, deadline=None)
@given(grids())
def test_center_roundtrip_all_indices(g):
    idx = np.stack(np.meshgrid(*[np.arange(d) for d in g.dims], indexing="ij"), -1).reshape(-1, 3)
    assert np.array_equal(world_to_voxel(voxel_center(idx, g), g), idx)


def test_invalid_grids():
    with pytest.raises(ConfigError):
        GridConfig((0, 1.05), (0, 1), (0, 1), 0.2)
    with pytest.raises(ConfigError):
        GridConfig((1, 0), (0, 1), (0, 1), 0.2).dims
    with pytest.raises(ConfigError):
        GridConfig(voxel_size=0.0).dims


def test_label_table_counts():
    t = LabelTable()
    assert t.n_classes == 5 and t.n_logits == 6 and t.n_labels == 7
    assert t.noise_id not in t.semantic_ids and t.empty_id not in t.semantic_ids
    assert LabelTable(noise_id=None).n_labels == 6
    with pytest.raises(ConfigError):
        LabelTable(noise_id=3)


def test_voxel_grid_validation():
    g = GridConfig.tiny()
    with pytest.raises(ValueError):
        VoxelGrid(np.zeros((1, 2, 3), np.uint8), g)
    bad = np.zeros(g.dims, np.uint8)
    bad[0, 0, 0] = 9
    with pytest.raises(ValueError):
        VoxelGrid(bad, g)
    v = VoxelGrid(np.zeros(g.dims, np.uint8), g)
    with pytest.raises(ValueError):
        v.labels[0, 0, 0] = 1


def test_point_cloud_widths():
    assert len(PointCloud("lidar", np.zeros((4, 3)))) == 4
    with pytest.raises(ValueError):
        PointCloud("radar", np.zeros((4, 5)))
    with pytest.raises(ValueError):
        PointCloud("lidar", np.array([[np.nan, 0, 0]]))
    with pytest.raises(ValueError):
        PointCloud("sonar", np.zeros((1, 3)))
    # points outside the grid are allowed
    PointCloud("lidar", np.array([[1e3, 0, 0]]))


def test_bev_map_scale_check():
    g = GridConfig.tiny()
    BEVFeatureMap(np.zeros((3, 8, 8)), 1).check_grid(g)
    with pytest.raises(ValueError):
        BEVFeatureMap(np.zeros((3, 8, 8)), 0).check_grid(g)
    with pytest.raises(ValueError):
        BEVFeatureMap(np.full((1, 2, 2), np.inf))


def test_camera_bundle_validation():
    K = np.eye(3)[None]
    T = np.eye(4)[None]
    CameraBundle(np.zeros((1, 3, 4, 4)), K, T, np.zeros((1, 4, 4)))
    with pytest.raises(ValueError):
        CameraBundle(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 3)), T, np.zeros((1, 4, 4)))
    with pytest.raises(ValueError):
        CameraBundle(np.zeros((1, 3, 4, 4)), K, T, -np.ones((1, 4, 4)))
