"""Named-array persistence: little-endian float64 blob plus a JSON manifest.

Layout of a saved directory::

    manifest.json   {"format_version": 1, "tensors": [{name, shape, offset, dtype}], ...extra}
    tensors.bin     concatenated arrays, row-major

Every write goes through a temp file and ``os.replace`` so readers never see a
half-written file.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def save_arrays(directory: str | os.PathLike, arrays: Mapping[str, np.ndarray], extra: Mapping | None = None) -> None:
    directory = Path(directory)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": "<f8"})
        chunks.append(raw)
        offset += len(raw)
    manifest = dict(extra or {})
    manifest["format_version"] = FORMAT_VERSION
    manifest["tensors"] = entries
    atomic_write_bytes(directory / BLOB, b"".join(chunks))
    atomic_write_text(directory / MANIFEST, dump_json(manifest))


def load_manifest(directory: str | os.PathLike) -> dict:
    path = Path(directory) / MANIFEST
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version {manifest.get('format_version')!r}")
    return manifest


def load_arrays(directory: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = load_manifest(directory)
    blob = (directory / BLOB).read_bytes()
    arrays = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        stop = start + 8 * count
        if stop > len(blob):
            raise ValueError(f"{directory}: tensor {entry['name']!r} runs past end of blob")
        arrays[entry["name"]] = np.frombuffer(blob[start:stop], dtype="<f8").reshape(shape).astype(np.float64)
    return arrays, manifest
