"""Flat binary checkpoint container.

Layout: 8-byte little-endian header length, a JSON index (names, shapes,
byte offsets, precision, optional metadata), then the raw tensor payload.
The same container serves both backbone families.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

_PRECISION = {"f32": np.float32, "f64": np.float64}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(tensors: Mapping[str, np.ndarray], path, meta: dict | None = None) -> None:
    entries = []
    offset = 0
    payload = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype == np.float32:
            precision = "f32"
        elif arr.dtype == np.float64:
            precision = "f64"
        else:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "precision": precision, "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"format": 1, "tensors": entries, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in payload:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise CheckpointError(f"checkpoint {path} truncated")
    (header_len,) = struct.unpack("<Q", blob[:8])
    try:
        header = json.loads(blob[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint {path} has a corrupt header") from exc
    if header.get("format") != 1:
        raise CheckpointError(f"checkpoint {path} has unknown format {header.get('format')!r}")
    base = 8 + header_len
    tensors = {}
    for entry in header["tensors"]:
        dtype = _PRECISION[entry["precision"]]
        start = base + entry["offset"]
        raw = blob[start:start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"checkpoint {path} payload truncated at {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
    return tensors, header.get("meta", {})
