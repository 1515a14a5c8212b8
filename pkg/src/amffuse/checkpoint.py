"""Named float arrays stored as a text manifest plus one raw little-endian float64 blob.

Manifest layout (``<stem>.manifest``)::

    amf-ckpt 1
    meta <json object>
    <name>\t<dim,dim,...>\t<byte offset>

The blob ``<stem>.bin`` holds the arrays back to back in manifest order.
Scalars use an empty shape field.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = "amf-ckpt"
VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".manifest", ".bin") else path


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write ``arrays`` and return the manifest path."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{MAGIC} {VERSION}", "meta " + json.dumps(meta or {}, sort_keys=True)]
    offset = 0
    with open(stem.with_suffix(".bin"), "wb") as fh:
        for name, arr in arrays.items():
            if any(c in name for c in "\t\n"):
                raise CheckpointError(f"invalid array name {name!r}")
            a = np.array(arr, dtype=_DTYPE, order="C")  # keeps 0-d shapes, unlike ascontiguousarray
            fh.write(a.tobytes())
            lines.append(f"{name}\t{','.join(str(d) for d in a.shape)}\t{offset}")
            offset += a.nbytes
    manifest = stem.with_suffix(".manifest")
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    stem = _stem(path)
    manifest = stem.with_suffix(".manifest")
    lines = manifest.read_text().splitlines()
    if not lines or lines[0].split()[0] != MAGIC:
        raise CheckpointError(f"{manifest}: not a checkpoint manifest")
    version = int(lines[0].split()[1])
    if version != VERSION:
        raise CheckpointError(f"{manifest}: unsupported version {version}")
    meta = json.loads(lines[1][len("meta "):]) if len(lines) > 1 and lines[1].startswith("meta ") else {}
    blob = stem.with_suffix(".bin").read_bytes()
    arrays = {}
    for line in lines[2:]:
        if not line.strip():
            continue
        name, shape_s, off_s = line.split("\t")
        shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
        count = int(np.prod(shape)) if shape else 1
        off = int(off_s)
        end = off + count * _DTYPE.itemsize
        if end > len(blob):
            raise CheckpointError(f"{name}: blob truncated")
        arrays[name] = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=off).reshape(shape).astype(np.float64)
    return arrays, meta


def prefixed(state: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v for k, v in state.items()}


def strip_prefix(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
