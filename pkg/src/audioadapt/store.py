"""On-disk format shared by datasets and model checkpoints.

A store is a directory holding one flat little-endian float32 ``.bin`` file
per named array plus a ``manifest.json`` describing shapes and metadata.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = "1"


class StoreError(ValueError):
    pass


def _safe_filename(name: str) -> str:
    return name.replace(".", "__").replace("/", "__") + ".bin"


def save_arrays(directory: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays as flat ``<f4`` files plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        fname = _safe_filename(name)
        (directory / fname).write_bytes(arr.tobytes())
        entries[name] = {"file": fname, "shape": list(arr.shape), "dtype": "<f4"}
    manifest = {"version": FORMAT_VERSION, "arrays": entries, "meta": meta or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_arrays(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back all arrays and the metadata block of a store directory."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise StoreError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    arrays = {}
    for name, entry in manifest["arrays"].items():
        raw = (directory / entry["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"])
        arrays[name] = arr.copy()
    return arrays, manifest.get("meta", {})
