"""Binary checkpoint files.

Layout (little-endian)::

    b"GLCK"  u32 version  u32 count
    count x { u32 name_len, name (utf-8), u32 rows, u32 cols, rows*cols f32 }

Optimizer moments are stored as ``adam.m.<name>`` / ``adam.v.<name>`` and the
step counter as the 1x1 tensor ``adam.step`` (exact below 2**24 steps).
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from .optim import AdamState

MAGIC = b"GLCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise CheckpointError(f"{name}: checkpoint tensors must be 2-D, got {arr.shape}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<II", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_tensors(path: Union[str, Path]) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + n].decode("utf-8")
            off += n
            rows, cols = struct.unpack_from("<II", buf, off)
            off += 8
            size = rows * cols * 4
            if off + size > len(buf):
                raise CheckpointError(f"{path}: truncated at tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=rows * cols,
                                      offset=off).reshape(rows, cols).astype(np.float32)
            off += size
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated checkpoint") from e
    return out


def save_checkpoint(path, params: Mapping[str, np.ndarray],
                    adam: Optional[AdamState] = None) -> None:
    tensors = dict(params)
    if adam is not None:
        for k in params:
            tensors[f"adam.m.{k}"] = adam.m[k]
            tensors[f"adam.v.{k}"] = adam.v[k]
        tensors["adam.step"] = np.array([[adam.step]], dtype=np.float32)
    save_tensors(path, tensors)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], Optional[AdamState]]:
    tensors = load_tensors(path)
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    if "adam.step" not in tensors:
        return params, None
    state = AdamState(step=int(tensors["adam.step"][0, 0]))
    for k in params:
        state.m[k] = tensors[f"adam.m.{k}"].copy()
        state.v[k] = tensors[f"adam.v.{k}"].copy()
    return params, state
