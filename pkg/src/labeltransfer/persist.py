"""Versioned binary weight files: a JSON header (shapes, config hash, seed)
followed by little-endian float64 payloads in declaration order."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LTWF"
VERSION = 1


def save_weights(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write header + arrays; `header` gains a `shapes` entry automatically."""
    header = dict(header)
    header["format_version"] = VERSION
    header["order"] = list(arrays.keys())
    header["shapes"] = {k: list(v.shape) for k, v in arrays.items()}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for k in arrays:
            f.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def load_weights(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a weight file (bad magic {magic!r})")
        (blob_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(blob_len).decode("utf-8"))
        if header.get("format_version") != VERSION:
            raise ValueError(f"{path}: unsupported format version {header.get('format_version')}")
        arrays = {}
        for k in header["order"]:
            shape = header["shapes"][k]
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"{path}: truncated payload for {k!r}")
            arrays[k] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return header, arrays
