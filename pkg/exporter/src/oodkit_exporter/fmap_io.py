"""Writers for the tensor bundle format consumed by oodkit.

The container layout is the interchange contract, so it is emitted here
from scratch rather than by importing the consumer:

    magic   4 bytes  b"FMAP"
    version u8       1
    ndim    u8       number of dimensions, 1..8
    dims    ndim * u32, little endian
    payload prod(dims) * f32, little endian, row major

The manifest is plain JSON; `build_manifest` assembles the document and
`write_manifest` serialises it deterministically (fixed key order,
two-space indent) so identical exports produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ExportError

MAGIC = b"FMAP"
VERSION = 1
MAX_NDIM = 8


def tensor_bytes(array: np.ndarray) -> bytes:
    """Serialise an array into the container format."""
    ndim = np.asarray(array).ndim
    if ndim < 1 or ndim > MAX_NDIM:
        raise ExportError(f"tensor rank {ndim} outside supported range 1..{MAX_NDIM}")
    arr = np.ascontiguousarray(array, dtype="<f4")
    for dim in arr.shape:
        if dim <= 0 or dim > 0xFFFFFFFF:
            raise ExportError(f"tensor dimension {dim} does not fit the header")
    header = struct.pack("<4sBB", MAGIC, VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + arr.tobytes(order="C")


def write_tensor(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(tensor_bytes(array))


def build_manifest(
    name: str,
    num_classes: int,
    stride_count: int,
    images: list[dict[str, Any]],
) -> dict[str, Any]:
    return {
        "name": name,
        "num_classes": num_classes,
        "stride_count": stride_count,
        "images": images,
    }


def write_manifest(path: Path, doc: dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
