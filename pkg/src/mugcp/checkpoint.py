"""Directory checkpoint: ``manifest.json`` + ``weights.bin``.

The manifest is a JSON array of ``{name, shape, dtype, byte_offset,
byte_length}`` in storage order; ``weights.bin`` holds the little-endian
raw values back to back.
"""

from __future__ import annotations

import json
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .errors import IntegrityError

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise TypeError(f"unsupported dtype {arr.dtype}")


def save_checkpoint(directory, params: Mapping, dtype: str | None = None) -> Path:
    """Write ``params`` (arrays or tensors) in mapping order; returns the directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest, offset = [], 0
    with open(directory / WEIGHTS, "wb") as fh:
        for name, p in params.items():
            arr = p if isinstance(p, np.ndarray) else np.asarray(p.data)
            tag = dtype or _dtype_tag(arr)
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
            manifest.append({"name": name, "shape": list(arr.shape), "dtype": tag,
                             "byte_offset": offset, "byte_length": len(raw)})
            fh.write(raw)
            offset += len(raw)
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return directory


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    """Read and validate a checkpoint; raises :class:`IntegrityError` on any mismatch."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
        blob = (directory / WEIGHTS).read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable checkpoint {directory}: {exc}") from None
    if not isinstance(manifest, list):
        raise IntegrityError("manifest must be a JSON array")
    out: dict[str, np.ndarray] = {}
    expected = 0
    for entry in manifest:
        try:
            name, shape, tag = entry["name"], tuple(entry["shape"]), entry["dtype"]
            offset, length = int(entry["byte_offset"]), int(entry["byte_length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise IntegrityError(f"malformed manifest entry {entry!r}: {exc}") from None
        if tag not in _DTYPES:
            raise IntegrityError(f"{name}: unknown dtype {tag!r}")
        if name in out:
            raise IntegrityError(f"duplicate tensor name {name!r}")
        if offset != expected:
            raise IntegrityError(f"{name}: byte_offset {offset} != expected {expected}")
        if length != int(np.prod(shape, dtype=np.int64)) * _DTYPES[tag].itemsize:
            raise IntegrityError(f"{name}: byte_length {length} inconsistent with shape {shape}")
        if offset + length > len(blob):
            raise IntegrityError(f"{name}: extends past end of {WEIGHTS} ({len(blob)} bytes)")
        arr = np.frombuffer(blob, dtype=_DTYPES[tag], count=length // _DTYPES[tag].itemsize,
                            offset=offset).reshape(shape)
        out[name] = arr.astype(_DTYPES[tag].newbyteorder("="))
        expected = offset + length
    if expected != len(blob):
        raise IntegrityError(f"{WEIGHTS} has {len(blob)} bytes, manifest describes {expected}")
    return out


def checkpoint_dtype(arrays: Mapping[str, np.ndarray]) -> str:
    tags = {_dtype_tag(a) for a in arrays.values()}
    if len(tags) != 1:
        raise IntegrityError(f"mixed dtypes in checkpoint: {sorted(tags)}")
    return tags.pop()
