"""Binary checkpoint format.

Layout (little-endian)::

    b"UDCK" | u32 version | u32 n | n bytes of JSON config
    u32 n_records | records...

    record: u32 name_len | name (utf-8) | u32 ndim | u32 dims[ndim] | float32 data

The JSON block carries the model config plus any caller metadata (training
state). Loading against an expected config fails loudly on any difference.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"UDCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, config: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    """Write ``arrays`` (name -> array) in insertion order; arrays are stored as float32."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path, expected_config: Mapping | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {raw[:4]!r}")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    config = json.loads(raw[pos:pos + n])
    pos += n
    if expected_config is not None:
        for key, value in expected_config.items():
            if config.get(key) != value:
                raise CheckpointError(f"{path}: config mismatch on {key!r}: file={config.get(key)!r} expected={value!r}")
    (n_records,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_records):
        (ln,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
        pos += 4 * count
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return config, arrays
