"""Versioned binary container for named arrays.

Layout (all integers little-endian)::

    magic    4 bytes   b"SHPK"
    version  uint32
    hlen     uint64    length of the JSON header in bytes
    header   hlen bytes UTF-8 JSON, keys sorted:
             {"kind": str, "meta": {...},
              "arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload  concatenated C-order array bytes; offsets are relative to the
             start of the payload

The writer emits arrays in the order given and never records timestamps, so
identical inputs give byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SHPK"
VERSION = 1


class ContainerError(ValueError):
    pass


def write_container(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
        raw = a.astype(dt, copy=False).tobytes()
        entries.append({"name": name, "dtype": dt.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta, "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def read_container(path, kind: str | None = None):
    """Return ``(meta, arrays)``; raises ContainerError on a malformed file."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ContainerError(f"{path}: not a shotpack container")
    version, hlen = struct.unpack("<IQ", buf[4:16])
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    header = json.loads(buf[16:16 + hlen])
    if kind is not None and header["kind"] != kind:
        raise ContainerError(f"{path}: expected a {kind!r} container, found {header['kind']!r}")
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        arr = np.frombuffer(buf[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return header["meta"], arrays
