"""Named-tensor container: a JSON header followed by raw little-endian blobs.

Layout::

    b"VFLW"                      4-byte magic
    uint64 little-endian         header length in bytes
    header (UTF-8 JSON)          {"version", "meta", "tensors": [{name, shape, dtype, offset, nbytes}]}
    blobs                        concatenated, offsets relative to the end of the header

Weights are stored as float32. Integer tensors (token ids, counters) are
allowed as int64 so caches and optimizer state share one format.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"VFLW"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


class ContainerError(ValueError):
    pass


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f" and arr.dtype != np.float64:
            arr = arr.astype("<f4")
            dtype = "float32"
        elif arr.dtype == np.float64:
            arr = arr.astype("<f8")
            dtype = "float64"
        elif arr.dtype.kind in "iub":
            arr = arr.astype("<i8")
            dtype = "int64"
        else:
            raise ContainerError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": VERSION, "meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_tensors(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    """Returns ``(tensors, meta)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ContainerError(f"{path}: not a tensor container (bad magic)")
    (hlen,) = struct.unpack("<Q", data[4:12])
    try:
        header = json.loads(data[12 : 12 + hlen])
    except json.JSONDecodeError as exc:
        raise ContainerError(f"{path}: corrupt header") from exc
    if "version" not in header:
        raise ContainerError(f"{path}: header lacks a version field")
    if header["version"] != VERSION:
        raise ContainerError(f"{path}: unsupported container version {header['version']}")
    base = 12 + hlen
    out = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        raw = data[start : start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ContainerError(f"{path}: truncated blob for {e['name']!r}")
        out[e["name"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return out, header.get("meta", {})
