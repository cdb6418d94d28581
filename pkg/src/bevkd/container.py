"""LCR1: a JSON header followed by raw little-endian arrays.

Layout::

    b"LCR1" | uint64 LE header length | UTF-8 JSON header | data block

The header carries ``grid`` and ``labels`` (optional), free-form ``meta``
and a ``tensors`` manifest of ``{name, dtype, shape, offset, nbytes}``
entries whose offsets are relative to the start of the data block.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from .grid import GridConfig, LabelTable

MAGIC = b"LCR1"
_ALIGN = 8


class ContainerFormatError(ValueError):
    """Malformed or truncated LCR1 file."""

    def __init__(self, message: str, sample_index: Optional[int] = None):
        if sample_index is not None:
            message = f"sample {sample_index}: {message}"
        super().__init__(message)
        self.sample_index = sample_index


@dataclass
class Container:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    grid: Optional[GridConfig] = None
    table: Optional[LabelTable] = None
    meta: dict = field(default_factory=dict)


def _le(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.dtype.byteorder == ">" or (a.dtype.byteorder == "=" and not np.little_endian):
        a = a.astype(a.dtype.newbyteorder("<"))
    return a


def write_container(path, tensors: Mapping[str, np.ndarray], grid: GridConfig = None,
                    table: LabelTable = None, meta: dict = None) -> None:
    manifest = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = _le(np.asarray(arr))
        pad = (-offset) % _ALIGN
        if pad:
            blobs.append(b"\0" * pad)
            offset += pad
        raw = arr.tobytes()
        manifest.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": "LCR1",
        "version": 1,
        "grid": grid.to_dict() if grid is not None else None,
        "labels": table.to_dict() if table is not None else None,
        "meta": meta or {},
        "tensors": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def _sample_of(name: str) -> Optional[int]:
    parts = name.split("/")
    if len(parts) > 1 and parts[0] == "samples" and parts[1].isdigit():
        return int(parts[1])
    return None


def read_container(path) -> Container:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise ContainerFormatError("missing LCR1 magic")
    (hlen,) = struct.unpack("<Q", buf[4:12])
    if 12 + hlen > len(buf):
        raise ContainerFormatError("truncated header")
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"corrupt header: {exc}") from None
    if not isinstance(header, dict) or header.get("format") != "LCR1":
        raise ContainerFormatError("header is not an LCR1 header")
    data = memoryview(buf)[12 + hlen:]
    tensors = {}
    for entry in header.get("tensors", []):
        try:
            name = entry["name"]
            dtype = np.dtype(entry["dtype"])
            shape = tuple(int(s) for s in entry["shape"])
            off, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerFormatError(f"bad manifest entry {entry!r}: {exc}") from None
        sidx = _sample_of(name)
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if expected != nbytes:
            raise ContainerFormatError(
                f"tensor {name!r}: shape {shape} needs {expected} bytes, manifest says {nbytes}", sidx)
        if off < 0 or off + nbytes > len(data):
            raise ContainerFormatError(f"tensor {name!r} runs past end of file", sidx)
        arr = np.frombuffer(data[off:off + nbytes], dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    grid = GridConfig.from_dict(header["grid"]) if header.get("grid") else None
    table = LabelTable.from_dict(header["labels"]) if header.get("labels") else None
    return Container(tensors, grid, table, header.get("meta", {}))
