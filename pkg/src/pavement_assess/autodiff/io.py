"""``.ften`` tensor files and parameter checkpoints.

Layout: ``b"FTEN"``, little-endian u32 rank, rank x u32 extents, then the
row-major little-endian float32 payload. Checkpoints are a directory with one
``<name>.ften`` per parameter and a ``manifest.json`` listing names and shapes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"FTEN"


class TensorFileError(ValueError):
    pass


class CheckpointError(ValueError):
    """Checkpoint missing, unreadable, or inconsistent with its manifest."""


def save_ften(path, array) -> None:
    arr = np.asarray(array, dtype="<f4", order="C")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def load_ften(path) -> np.ndarray:
    """Read a ``.ften`` file as float64."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise TensorFileError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise TensorFileError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", raw, 4)
    header = 8 + 4 * rank
    if len(raw) < header:
        raise TensorFileError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) != header + 4 * count:
        raise TensorFileError(f"{path}: payload has {len(raw) - header} bytes, expected {4 * count}")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=header)
    return data.astype(np.float64).reshape(shape)


def _file_name(name: str) -> str:
    return name.replace("/", "__") + ".ften"


def save_checkpoint(directory, params: Mapping[str, Tensor], meta: Mapping[str, Any] | None = None) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "meta": dict(meta or {}),
        "parameters": [
            {"name": name, "shape": list(p.shape), "file": _file_name(name)} for name, p in params.items()
        ],
    }
    for name, p in params.items():
        save_ften(out / _file_name(name), p.data)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(directory) -> dict[str, Any]:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise CheckpointError(f"missing checkpoint manifest {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupted manifest ({exc.msg})") from None
    if not isinstance(manifest, dict) or not isinstance(manifest.get("parameters"), list):
        raise CheckpointError(f"{path}: manifest has no parameter list")
    return manifest


def load_checkpoint(directory, params: Mapping[str, Tensor]) -> dict[str, Any]:
    """Copy saved values into ``params`` in place; returns the manifest meta."""
    manifest = read_manifest(directory)
    entries = {}
    for entry in manifest["parameters"]:
        if not isinstance(entry, dict) or "name" not in entry:
            raise CheckpointError("manifest entry without a parameter name")
        entries[entry["name"]] = entry
    for name, p in params.items():
        entry = entries.get(name)
        if entry is None:
            raise CheckpointError(f"parameter {name!r} missing from manifest")
        if list(entry.get("shape", [])) != list(p.shape):
            raise CheckpointError(f"parameter {name!r}: manifest shape {entry.get('shape')} != model shape {list(p.shape)}")
        try:
            data = load_ften(Path(directory) / entry.get("file", _file_name(name)))
        except (OSError, TensorFileError) as exc:
            raise CheckpointError(f"parameter {name!r}: {exc}") from None
        if data.shape != p.shape:
            raise CheckpointError(f"parameter {name!r}: file shape {data.shape} != {p.shape}")
        p.data[...] = data
    extra = sorted(set(entries) - set(params))
    if extra:
        raise CheckpointError(f"unexpected parameter(s) in manifest: {', '.join(extra)}")
    return manifest.get("meta", {})
