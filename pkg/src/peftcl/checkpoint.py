"""Checkpoint directories: a text ``manifest`` plus a raw ``payload.bin``.

Manifest lines::

    format peftcl-checkpoint 1
    meta <key> <json value>
    tensor <name> <dim,dim,...|scalar> f64le <byte offset>

The payload holds every tensor's little-endian float64 values, row-major,
back to back in manifest order.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

MANIFEST = "manifest"
PAYLOAD = "payload.bin"
HEADER = "format peftcl-checkpoint 1"
_F64LE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def _shape_text(shape: tuple[int, ...]) -> str:
    return ",".join(str(n) for n in shape) if shape else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "scalar" else tuple(int(n) for n in text.split(","))


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, Tensor | np.ndarray],
                    meta: Mapping[str, object] | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [HEADER]
    for key, value in (meta or {}).items():
        if any(c.isspace() for c in key):
            raise CheckpointError(f"meta key {key!r} contains whitespace")
        lines.append(f"meta {key} {json.dumps(value, sort_keys=True)}")
    offset = 0
    chunks = []
    for name, t in tensors.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype=_F64LE)
        lines.append(f"tensor {name} {_shape_text(arr.shape)} f64le {offset}")
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    (path / PAYLOAD).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text("\n".join(lines) + "\n")
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, object]]:
    path = Path(path)
    if not (path / MANIFEST).is_file():
        raise CheckpointError(f"no checkpoint manifest at {path}")
    lines = (path / MANIFEST).read_text().splitlines()
    if not lines or lines[0] != HEADER:
        raise CheckpointError(f"{path / MANIFEST}: unrecognized header")
    payload = (path / PAYLOAD).read_bytes()
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, object] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, value = rest.split(" ", 1)
            meta[key] = json.loads(value)
        elif kind == "tensor":
            name, shape_text, dtype, offset = rest.split(" ")
            if dtype != "f64le":
                raise CheckpointError(f"line {lineno}: unsupported dtype {dtype}")
            shape = _parse_shape(shape_text)
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            start = int(offset)
            end = start + count * 8
            if end > len(payload):
                raise CheckpointError(f"line {lineno}: tensor {name} runs past the payload")
            tensors[name] = np.frombuffer(payload[start:end], dtype=_F64LE).reshape(shape).astype(np.float64)
        else:
            raise CheckpointError(f"line {lineno}: unknown record {kind!r}")
    return tensors, meta
