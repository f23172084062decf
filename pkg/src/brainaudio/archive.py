"""Array-archive format used for datasets, bundles and checkpoints.

A directory holds ``manifest.json`` plus one flat little-endian file per
named array (``.f32`` for float32, ``.i32`` for int32). The manifest records
shapes, dtypes, a SHA-256 per file and the hash of the embedded config.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .errors import CorruptionError, IntegrityError

MANIFEST = "manifest.json"
_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _encode(arr) -> tuple[str, bytes]:
    arr = np.asarray(arr)
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
        tag = "i32"
    else:
        tag = "f32"
    return tag, np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()


def write_json_atomic(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    os.replace(tmp, path)


def save_archive(path, arrays: dict, config: dict, meta: dict | None = None) -> str:
    """Write ``arrays`` under ``path`` atomically; returns the config hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    entries = {}
    for name in sorted(arrays):
        tag, data = _encode(arrays[name])
        fname = f"{name}.{tag}"
        (tmp / fname).write_bytes(data)
        entries[name] = {
            "file": fname,
            "dtype": tag,
            "shape": list(np.shape(arrays[name])),
            "sha256": _sha256(data),
        }
    chash = config_hash(config)
    manifest = {
        "arrays": entries,
        "config": config,
        "config_hash": chash,
        "meta": meta or {},
    }
    write_json_atomic(tmp / MANIFEST, manifest)
    if path.exists():
        old = path.with_name(f".{path.name}.old")
        if old.exists():
            shutil.rmtree(old)
        os.replace(path, old)
        os.replace(tmp, path)
        shutil.rmtree(old)
    else:
        os.replace(tmp, path)
    return chash


def read_manifest(path) -> dict:
    mpath = Path(path) / MANIFEST
    if not mpath.exists():
        raise IntegrityError(f"{mpath} not found")
    manifest = json.loads(mpath.read_text())
    if config_hash(manifest["config"]) != manifest["config_hash"]:
        raise CorruptionError(
            f"{mpath}: config hash {manifest['config_hash']} does not match "
            f"recomputed {config_hash(manifest['config'])}"
        )
    return manifest


def load_archive(path) -> tuple[dict, dict]:
    """Load and verify an archive; returns ``(arrays, manifest)``."""
    path = Path(path)
    manifest = read_manifest(path)
    arrays = {}
    for name, entry in manifest["arrays"].items():
        fpath = path / entry["file"]
        if not fpath.exists():
            raise IntegrityError(f"array file {entry['file']} missing from {path}")
        data = fpath.read_bytes()
        if _sha256(data) != entry["sha256"]:
            raise CorruptionError(f"content hash mismatch for {entry['file']} in {path}")
        arr = np.frombuffer(data, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        arrays[name] = arr.copy()
    return arrays, manifest
