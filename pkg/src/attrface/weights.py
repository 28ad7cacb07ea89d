"""Binary weight-file format for checkpoints.

Layout (all integers little-endian uint32 unless noted):

    magic   4 bytes  "AAFW"
    version uint32   currently 1
    count   uint32   number of named tensors
    per tensor, repeated ``count`` times, in ascending name order:
        name_len uint32, name bytes (utf-8)
        dtype    uint32  0 = f32, 1 = f64
        rank     uint32, dims uint32 each
        payload  little-endian values

Saving sorts tensors by name, so save -> load -> save round-trips to
byte-identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import WeightFileError
from .tensor import ShapeError, Tensor

WEIGHT_MAGIC = b"AAFW"
WEIGHT_VERSION = 1
_DTYPE_TAGS = {0: "<f4", 1: "<f8"}
_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_weights(path, params: Mapping[str, "Tensor | np.ndarray"]) -> None:
    path = Path(path)
    items = []
    for name in sorted(params):
        value = params[name]
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        if arr.dtype not in _TAG_OF:
            raise WeightFileError(f"tensor '{name}' has unsupported dtype {arr.dtype}")
        items.append((name, arr))
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<II", WEIGHT_VERSION, len(items)))
        for name, arr in items:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<II", _TAG_OF[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise WeightFileError(f"truncated payload: expected {n} bytes for {what}, "
                              f"got {len(buf)}")
    return buf


def load_weights(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != WEIGHT_MAGIC:
            raise WeightFileError(f"bad magic {magic!r}, expected {WEIGHT_MAGIC!r}")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != WEIGHT_VERSION:
            raise WeightFileError(f"unsupported format version {version}, "
                                  f"expected {WEIGHT_VERSION}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            tag, rank = struct.unpack("<II", _read_exact(f, 8, f"'{name}' descriptor"))
            if tag not in _DTYPE_TAGS:
                raise WeightFileError(f"tensor '{name}' has unknown dtype tag {tag}")
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"'{name}' dims"))
            dt = np.dtype(_DTYPE_TAGS[tag])
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            data = np.frombuffer(_read_exact(f, n_bytes, f"'{name}' payload"), dtype=dt)
            out[name] = data.reshape(shape).copy()
        if len(out) != count:
            raise WeightFileError(f"duplicate tensor names in file ({count} declared, "
                                  f"{len(out)} unique)")
    return out


def load_into_model(model, path) -> None:
    """Load a checkpoint into a model, validating names and shapes."""
    loaded = load_weights(path)
    params = model.parameters()
    missing = sorted(set(params) - set(loaded))
    extra = sorted(set(loaded) - set(params))
    if missing or extra:
        raise ShapeError(f"checkpoint does not match model: missing {missing[:3]}, "
                         f"unexpected {extra[:3]}")
    for name, arr in loaded.items():
        if arr.shape != params[name].shape:
            raise ShapeError(f"tensor '{name}' has shape {arr.shape}, "
                             f"model expects {params[name].shape}")
        params[name].data = arr.astype(params[name].data.dtype, copy=False)
