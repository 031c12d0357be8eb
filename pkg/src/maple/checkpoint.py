"""Flat binary container of named tensors plus a JSON sidecar.

Layout (little-endian)::

    b"MAPLECK1"  u32 count
    repeated count times:
        u32 name_len, name bytes (utf-8), u32 rank, u64 dims[rank], u8 dtype tag,
        raw values (C order)

dtype tags: 0 = float32, 1 = float64, 2 = int64.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

MAGIC = b"MAPLECK1"
_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_DTYPES = {v: k for k, v in _TAGS.items()}


class CheckpointError(RuntimeError):
    pass


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d
            dt = arr.dtype.newbyteorder("<")
            if dt not in _TAGS:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(struct.pack("<B", _TAGS[dt]))
            fh.write(arr.astype(dt, copy=False).tobytes())
    os.replace(tmp, path)
    if meta is not None:
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def _records(path: Path, read_values: bool) -> Iterator[tuple[str, tuple[int, ...], np.dtype, np.ndarray | None]]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (n,) = struct.unpack("<I", fh.read(4))
            name = fh.read(n).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            (tag,) = struct.unpack("<B", fh.read(1))
            if tag not in _DTYPES:
                raise CheckpointError(f"unknown dtype tag {tag} for {name!r}")
            dt = _DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if read_values:
                buf = fh.read(nbytes)
                if len(buf) != nbytes:
                    raise CheckpointError(f"truncated values for {name!r}")
                yield name, shape, dt, np.frombuffer(buf, dtype=dt).reshape(shape).copy()
            else:
                fh.seek(nbytes, os.SEEK_CUR)
                yield name, shape, dt, None


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    return {name: arr for name, _, _, arr in _records(Path(path), True)}


def walk_tensors(path: str | Path) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, dtype) of every tensor, reading headers only."""
    return [(name, shape, dt.name) for name, shape, dt, _ in _records(Path(path), False)]


def load_meta(path: str | Path) -> dict:
    side = sidecar_path(path)
    if not side.exists():
        raise CheckpointError(f"missing sidecar {side}")
    return json.loads(side.read_text())
