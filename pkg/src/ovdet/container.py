"""Binary container: a JSON header followed by raw little-endian arrays.

Layout::

    8 bytes   magic  b"OVDETBIN"
    4 bytes   uint32 LE header length H
    H bytes   UTF-8 JSON header (sorted keys, compact separators)
    ...       concatenated array payloads, offsets listed in the header

The header has two keys: ``meta`` (free-form JSON) and ``arrays`` (a list of
``{name, dtype, shape, offset, nbytes}``). Writing is canonical, so
save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"OVDETBIN"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "u1"}


class ContainerError(ValueError):
    pass


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def encode(meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    entries = []
    payload = bytearray()
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise ContainerError(f"unsupported dtype {dtype} for array {name!r}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append(
            {"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": len(payload), "nbytes": len(raw)}
        )
        payload.extend(raw)
    header = canonical_json({"meta": dict(meta), "arrays": entries}).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + bytes(payload)


def decode(blob: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    if blob[: len(MAGIC)] != MAGIC:
        raise ContainerError("not an ovdet container (bad magic)")
    start = len(MAGIC) + 4
    (hlen,) = struct.unpack("<I", blob[len(MAGIC) : start])
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt container header: {exc}") from exc
    base = start + hlen
    arrays: dict[str, np.ndarray] = {}
    for e in header["arrays"]:
        lo = base + e["offset"]
        raw = blob[lo : lo + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ContainerError(f"truncated payload for array {e['name']!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(e["dtype"], copy=True)
    return header["meta"], arrays


def write(path: str | os.PathLike, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    blob = encode(meta, arrays)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return path


def read(path: str | os.PathLike) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def digest_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name, arr in arrays.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
