import json
import struct

import numpy as np
import pytest

from bevkd.config import apply_overrides, from_dict, load_yaml, to_dict
from bevkd.container import MAGIC, ContainerFormatError, read_container, write_container
from bevkd.grid import ConfigError, GridConfig, LabelTable, VoxelGrid
from bevkd.synthetic import WorldConfig

from conftest import random_grid


def test_roundtrip_mixed_dtypes(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a": rng.standard_normal((3, 4)).astype(np.float32),
        "b": rng.integers(0, 255, (5,), dtype=np.uint8),
        "c": rng.standard_normal((2, 2, 2)),
        "d": np.arange(7, dtype=np.int64),
        "big": np.arange(6, dtype=">i4"),
    }
    p = tmp_path / "x.lcr"
    write_container(p, tensors, GridConfig.tiny(), LabelTable(), {"k": [1, 2]})
    c = read_container(p)
    assert c.grid == GridConfig.tiny() and c.table == LabelTable() and c.meta == {"k": [1, 2]}
    for k, v in tensors.items():
        assert np.array_equal(c.tensors[k], v)
        assert c.tensors[k].dtype.newbyteorder("=") == v.dtype.newbyteorder("=")


def test_layout_is_little_endian_and_aligned(tmp_path):
    p = tmp_path / "x.lcr"
    write_container(p, {"a": np.array([1], np.uint8), "b": np.array([2.0])})
    raw = p.read_bytes()
    assert raw[:4] == MAGIC
    (n,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + n])
    offsets = {t["name"]: t["offset"] for t in header["tensors"]}
    assert offsets["b"] % 8 == 0
    data = raw[12 + n:]
    assert struct.unpack("<d", data[offsets["b"]:offsets["b"] + 8])[0] == 2.0


def test_voxel_grid_roundtrip_bit_exact(tmp_path):
    v = random_grid(np.random.default_rng(1))
    p = tmp_path / "g.lcr"
    write_container(p, {"gt": v.labels}, v.grid, v.table)
    c = read_container(p)
    assert VoxelGrid(c.tensors["gt"], c.grid, c.table) == v


@pytest.mark.parametrize("cut", [0, 3, 11, 20, -1])
def test_truncated_files_raise_format_error(tmp_path, cut):
    p = tmp_path / "x.lcr"
    write_container(p, {"samples/0/a": np.arange(100.0)})
    raw = p.read_bytes()
    q = tmp_path / "t.lcr"
    q.write_bytes(raw[:cut] if cut >= 0 else raw[:-8])
    with pytest.raises(ContainerFormatError):
        read_container(q)


def test_error_names_sample_index(tmp_path):
    p = tmp_path / "x.lcr"
    write_container(p, {"samples/3/a": np.arange(10.0)})
    raw = p.read_bytes()
    q = tmp_path / "t.lcr"
    q.write_bytes(raw[:-8])
    with pytest.raises(ContainerFormatError) as e:
        read_container(q)
    assert e.value.sample_index == 3


def test_corrupt_header(tmp_path):
    q = tmp_path / "t.lcr"
    q.write_bytes(MAGIC + struct.pack("<Q", 5) + b"{nope")
    with pytest.raises(ContainerFormatError):
        read_container(q)
    q.write_bytes(b"XXXX" + b"\0" * 20)
    with pytest.raises(ContainerFormatError):
        read_container(q)


def test_shape_mismatch_in_manifest(tmp_path):
    p = tmp_path / "x.lcr"
    write_container(p, {"samples/1/a": np.arange(4.0)})
    raw = p.read_bytes()
    (n,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + n])
    header["tensors"][0]["shape"] = [5]
    hb = json.dumps(header).encode()
    q = tmp_path / "t.lcr"
    q.write_bytes(MAGIC + struct.pack("<Q", len(hb)) + hb + raw[12 + n:])
    with pytest.raises(ContainerFormatError) as e:
        read_container(q)
    assert e.value.sample_index == 1


def test_config_from_dict_and_overrides(tmp_path):
    data = apply_overrides({}, ["radar.budget=12", "grid=tiny", "lidar.dropout=0.5", "camera.image_size=[8, 16]"])
    cfg = from_dict(WorldConfig, data)
    assert cfg.radar.budget == 12 and cfg.grid == GridConfig.tiny() and cfg.lidar.dropout == 0.5
    assert cfg.camera.image_size == (8, 16)
    again = from_dict(WorldConfig, to_dict(cfg))
    assert again == cfg
    with pytest.raises(ConfigError):
        from_dict(WorldConfig, {"nonsense": 1})
    with pytest.raises(ConfigError):
        from_dict(WorldConfig, {"lidar": {"dropout": 1.5}})
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no-equals-sign"])
    y = tmp_path / "w.yaml"
    y.write_text("radar:\n  budget: 3\n")
    assert from_dict(WorldConfig, load_yaml(y)).radar.budget == 3
