"""Flat parameter files: a JSON manifest of names/shapes and a little-endian f64 blob."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

BLOB_DTYPE = "<f8"


def pack(arrays: Mapping[str, np.ndarray]) -> tuple[list[dict], bytes]:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=BLOB_DTYPE)
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.size
    return entries, b"".join(chunks)


def unpack(entries: list[dict], blob: bytes) -> dict[str, np.ndarray]:
    flat = np.frombuffer(blob, dtype=BLOB_DTYPE)
    out = {}
    for e in entries:
        n = int(np.prod(e["shape"], dtype=np.int64))
        out[e["name"]] = flat[e["offset"]:e["offset"] + n].astype(np.float64).reshape(e["shape"])
    if entries:
        last = entries[-1]
        end = last["offset"] + int(np.prod(last["shape"], dtype=np.int64))
        if end != flat.size:
            raise ValueError(f"parameter blob has {flat.size} values, manifest expects {end}")
    return out


def save_arrays(path_prefix: str | Path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``<prefix>.json`` and ``<prefix>.bin``."""
    prefix = Path(path_prefix)
    entries, blob = pack(arrays)
    manifest = {"dtype": BLOB_DTYPE, "params": entries, **(meta or {})}
    prefix.with_suffix(".bin").write_bytes(blob)
    prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_arrays(path_prefix: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    prefix = Path(path_prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    arrays = unpack(manifest["params"], prefix.with_suffix(".bin").read_bytes())
    return arrays, manifest
