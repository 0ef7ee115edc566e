"""Named-array container used for model checkpoints and simulator sidecars.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"PISPCKPT"
    bytes 8..15   uint64 header length L
    bytes 16..    L bytes of UTF-8 JSON header
    then          concatenated raw array bytes

The header is ``{"format": "pseudoisp-container", "version": 1, "meta": {...},
"arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}`` where
``dtype`` is a numpy little-endian type string (``"<f4"``, ``"<f8"``, ...)
and ``offset`` counts from the first byte after the header.  The JSON is
written with sorted keys so identical inputs give identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PISPCKPT"
VERSION = 1


def dumps(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append(
            {"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {"format": "pseudoisp-container", "version": VERSION, "meta": meta or {}, "arrays": entries}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:8] != MAGIC:
        raise ValueError("not a pseudoisp container (bad magic)")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
    if header.get("version") != VERSION:
        raise ValueError(f"unsupported container version {header.get('version')!r}")
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        data = np.frombuffer(buf, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)), offset=start)
        arrays[e["name"]] = data.reshape(e["shape"]).copy()
    return arrays, header["meta"]


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_bytes(dumps(arrays, meta))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(buf)
