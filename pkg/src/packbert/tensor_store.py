"""Flat binary container for named 32-bit tensors plus a JSON metadata block.

Layout: 8-byte magic, little-endian u32 header length, UTF-8 JSON header,
then the raw tensor bytes back to back. The header lists each tensor's
name, dtype, shape and offset into the data region. Checkpoints and
adapter files share this one format.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"PBTENS01"

# 32-bit payloads only; callers cast before writing.
_DTYPES = {"<f4": np.dtype("<f4"), "<i4": np.dtype("<i4")}


def _canonical_dtype(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "<f4"
    if arr.dtype == np.int32:
        return "<i4"
    raise DataError(
        f"tensor dtype {arr.dtype} not storable; cast to float32 or int32 first"
    )


def write_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        code = _canonical_dtype(arr)
        raw = arr.astype(_DTYPES[code], copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": code,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"meta": meta or {}, "tensors": entries}, ensure_ascii=False, sort_keys=True
    ).encode("utf-8")
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read tensor file {path}: {e}") from e
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path} is not a tensor container (bad magic)")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    hstart = len(MAGIC) + 4
    if hstart + hlen > len(raw):
        raise DataError(f"{path} is truncated inside the header")
    try:
        header = json.loads(raw[hstart : hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path} has a corrupt header: {e}") from e
    data = raw[hstart + hlen :]
    tensors: dict[str, np.ndarray] = {}
    for ent in header.get("tensors", []):
        name, code = ent["name"], ent["dtype"]
        if code not in _DTYPES:
            raise DataError(f"{path}: tensor {name} has unsupported dtype {code}")
        start, nbytes = ent["offset"], ent["nbytes"]
        if start + nbytes > len(data):
            raise DataError(f"{path} is truncated inside tensor {name}")
        arr = np.frombuffer(data[start : start + nbytes], dtype=_DTYPES[code])
        tensors[name] = arr.reshape(ent["shape"]).copy()
    return tensors, header.get("meta", {})
