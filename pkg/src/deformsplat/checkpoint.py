"""Versioned little-endian binary container: JSON metadata + raw arrays.

Layout: 8-byte magic, u32 version, u64 metadata length, UTF-8 JSON metadata
(sorted keys), then the raw bytes of every array back to back in the order
listed in metadata["arrays"]. Writes go to a temp file in the target
directory and are renamed into place, so a checkpoint is never half-written.
Loading a file and saving it again is byte-identical.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Any

import numpy as np

MAGIC = b"DSPLCKPT"
VERSION = 1
_HEADER = struct.Struct("<4xI Q")  # version, meta length (after 8-byte magic)


def save_container(
    path: str, meta: dict[str, Any], arrays: dict[str, np.ndarray]
) -> None:
    """Atomically write metadata plus named arrays."""
    entries = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        entries.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)}
        )
        arrays[name] = arr
    full_meta = dict(meta)
    full_meta["arrays"] = entries
    blob = json.dumps(full_meta, sort_keys=True, separators=(",", ":")).encode("utf-8")

    out_dir = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", VERSION, len(blob)))
            fh.write(blob)
            for e in entries:
                fh.write(arrays[e["name"]].tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_container(path: str) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Read a container; raises ValueError on bad magic, version, or truncation."""
    if not path:
        raise ValueError("empty checkpoint path")
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 + 12 or data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    version, meta_len = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    body = 8 + 12
    if len(data) < body + meta_len:
        raise ValueError(f"{path}: truncated metadata")
    try:
        meta = json.loads(data[body : body + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt metadata ({exc})") from exc

    arrays: dict[str, np.ndarray] = {}
    offset = body + meta_len
    for e in meta.pop("arrays", []):
        dt = np.dtype(e["dtype"])
        shape = tuple(e["shape"])
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise ValueError(f"{path}: truncated array data for '{e['name']}'")
        arrays[e["name"]] = (
            np.frombuffer(data[offset : offset + nbytes], dtype=dt)
            .reshape(shape)
            .copy()
        )
        offset += nbytes
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after array data")
    return meta, arrays
