"""The S3DM binary container: grids (version 1), named tensors (version 2).

Grid layout: magic "S3DM", version u32, dims 3xu32, channel count u32,
then little-endian f32 payload in row-major x, y, z, channel order.

Checkpoint layout extends the same header: magic, version=2, a length-
prefixed JSON metadata blob, then a named-tensor table of
(u16 name length, UTF-8 name, u8 dtype tag, u8 rank, u32 shape...,
payload). Tensors are written in sorted name order so serialization is
canonical: save, load, save yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

MAGIC = b"S3DM"
GRID_VERSION = 1
TENSORS_VERSION = 2

_DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAG_OF = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class ContainerError(ValueError):
    pass


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ContainerError("truncated container file")
    return data


def save_grid_values(values: np.ndarray, path) -> None:
    values = np.asarray(values)
    if values.ndim != 4:
        raise ContainerError(f"grid payload must be 4D, got {values.shape}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", GRID_VERSION))
        fh.write(struct.pack("<3I", *values.shape[:3]))
        fh.write(struct.pack("<I", values.shape[3]))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def load_grid_values(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise ContainerError(f"{path}: bad magic bytes")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != GRID_VERSION:
            raise ContainerError(f"{path}: unsupported grid version {version}")
        dims = struct.unpack("<3I", _read_exact(fh, 12))
        (channels,) = struct.unpack("<I", _read_exact(fh, 4))
        count = dims[0] * dims[1] * dims[2] * channels
        payload = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
        if fh.read(1):
            raise ContainerError(f"{path}: trailing bytes after payload")
    return payload.reshape(dims + (channels,)).astype(np.float64)


def save_tensors(arrays: dict[str, np.ndarray], path, metadata: dict | None = None) -> None:
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", TENSORS_VERSION))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            if arr.dtype not in _TAG_OF:
                raise ContainerError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", _TAG_OF[arr.dtype]))
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise ContainerError(f"{path}: bad magic bytes")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != TENSORS_VERSION:
            raise ContainerError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4))
        metadata = json.loads(_read_exact(fh, meta_len).decode())
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode()
            (tag,) = struct.unpack("<B", _read_exact(fh, 1))
            if tag not in _DTYPE_TAGS:
                raise ContainerError(f"{path}: unknown dtype tag {tag}")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            dtype = _DTYPE_TAGS[tag]
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            payload = np.frombuffer(_read_exact(fh, dtype.itemsize * n), dtype=dtype)
            arrays[name] = payload.reshape(shape).astype(dtype.newbyteorder("="))
        if fh.read(1):
            raise ContainerError(f"{path}: trailing bytes after tensor table")
    return arrays, metadata


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, entries: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(entries, fh, indent=2, sort_keys=True)


def read_manifest(path) -> dict:
    if not os.path.exists(path):
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
