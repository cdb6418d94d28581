from __future__ import annotations

from collections import Counter
from typing import List, Sequence

import numpy as np

from ..container import ContainerFormatError, read_container, write_container
from ..grid import CameraBundle, PointCloud, SceneObject, SceneSample, VoxelGrid, tag_key

_FIELDS = ("gt", "lidar", "radar", "cam/images", "cam/intrinsics", "cam/extrinsics", "cam/depth")
_SENSOR_OF = {"lidar": "lidar", "radar": "radar", "cam/images": "cameras", "cam/intrinsics": "cameras",
              "cam/extrinsics": "cameras", "cam/depth": "cameras"}


def tag_counts(samples: Sequence[SceneSample]) -> dict:
    counts = Counter()
    for s in samples:
        counts.update(s.tags)
    return dict(sorted(counts.items()))


def write_dataset(samples: Sequence[SceneSample], path, world: dict = None) -> None:
    samples = list(samples)
    if not samples:
        raise ValueError("cannot write an empty dataset")
    grid, table = samples[0].gt.grid, samples[0].gt.table
    tensors = {}
    meta_samples = []
    for i, s in enumerate(samples):
        if s.gt.grid != grid or s.gt.table != table:
            raise ValueError(f"sample {i} uses a different grid or label table")
        p = f"samples/{i}/"
        tensors[p + "gt"] = s.gt.labels
        if s.lidar is not None:
            tensors[p + "lidar"] = s.lidar.points
        if s.radar is not None:
            tensors[p + "radar"] = s.radar.points
        if s.cameras is not None:
            tensors[p + "cam/images"] = s.cameras.images
            tensors[p + "cam/intrinsics"] = s.cameras.intrinsics
            tensors[p + "cam/extrinsics"] = s.cameras.extrinsics
            tensors[p + "cam/depth"] = s.cameras.gt_depth
        sensors = [k for k, v in (("lidar", s.lidar), ("radar", s.radar), ("cameras", s.cameras))
                   if v is not None]
        meta_samples.append({"seed": s.seed, "tags": sorted(s.tags), "sensors": sensors,
                             "objects": [o.to_dict() for o in s.objects]})
    meta = {
        "kind": "dataset",
        "samples": meta_samples,
        "manifest": {"n_samples": len(samples), "tag_counts": tag_counts(samples),
                     "tag_sets": dict(Counter(tag_key(s.tags) for s in samples))},
        "world": world,
    }
    write_container(path, tensors, grid, table, meta)


def read_dataset(path) -> List[SceneSample]:
    c = read_container(path)
    meta = c.meta
    if meta.get("kind") != "dataset" or c.grid is None or c.table is None:
        raise ContainerFormatError("file is not an LCR1 dataset")
    entries = meta.get("samples", [])
    if meta.get("manifest", {}).get("n_samples") != len(entries):
        raise ContainerFormatError("manifest sample count disagrees with sample table")
    out = []
    for i, m in enumerate(entries):
        p = f"samples/{i}/"
        sensors = set(m.get("sensors", ("lidar", "radar", "cameras")))
        need = ["gt"] + [f for f in _FIELDS[1:] if _SENSOR_OF[f] in sensors]
        missing = [f for f in need if p + f not in c.tensors]
        if missing:
            raise ContainerFormatError(f"missing tensors {missing}", i)
        try:
            gt = VoxelGrid(c.tensors[p + "gt"], c.grid, c.table)
            lidar = radar = cams = None
            if "lidar" in sensors:
                if c.tensors[p + "lidar"].ndim != 2 or c.tensors[p + "lidar"].shape[1] != 3:
                    raise ValueError("lidar must be (N, 3)")
                lidar = PointCloud("lidar", c.tensors[p + "lidar"])
            if "radar" in sensors:
                if c.tensors[p + "radar"].ndim != 2 or c.tensors[p + "radar"].shape[1] != 6:
                    raise ValueError("radar must be (N, 6)")
                radar = PointCloud("radar", c.tensors[p + "radar"])
            if "cameras" in sensors:
                cams = CameraBundle(c.tensors[p + "cam/images"], c.tensors[p + "cam/intrinsics"],
                                    c.tensors[p + "cam/extrinsics"], c.tensors[p + "cam/depth"])
            objects = tuple(SceneObject.from_dict(o) for o in m.get("objects", []))
            out.append(SceneSample(gt, lidar, radar, cams, frozenset(m["tags"]), int(m["seed"]), objects))
        except (ValueError, KeyError, TypeError) as exc:
            raise ContainerFormatError(str(exc), i) from None
    if tag_counts(out) != meta["manifest"].get("tag_counts"):
        raise ContainerFormatError("manifest tag counts do not match the samples")
    return out
