"""Tensor dumps: a JSON manifest plus one raw little-endian file per tensor."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

_CODES = {"f32": "<f4", "f64": "<f8"}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

MANIFEST = "manifest.json"


def _safe_filename(name: str) -> str:
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in name) + ".bin"


def dump_tensors(directory, tensors: Mapping[str, Tensor | np.ndarray], extra: dict | None = None) -> Path:
    """Write ``tensors`` under ``directory``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        code = _NAMES.get(arr.dtype)
        if code is None:
            arr = arr.astype(np.float64)
            code = "f64"
        fname = _safe_filename(name)
        np.ascontiguousarray(arr, dtype=_CODES[code]).tofile(directory / fname)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code, "file": fname})
    manifest = {"format": "taskmod.tensors", "version": 1, "tensors": entries}
    if extra:
        manifest.update(extra)
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_manifest(directory) -> dict:
    return json.loads((Path(directory) / MANIFEST).read_text())


def load_tensors(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = load_manifest(directory)
    out = {}
    for e in manifest["tensors"]:
        raw = np.fromfile(directory / e["file"], dtype=_CODES[e["dtype"]])
        expected = int(np.prod(e["shape"])) if e["shape"] else 1
        if raw.size != expected:
            raise ValueError(f"{e['name']}: payload has {raw.size} values, shape {e['shape']} needs {expected}")
        out[e["name"]] = raw.reshape(e["shape"]).astype(raw.dtype.newbyteorder("="))
    return out
