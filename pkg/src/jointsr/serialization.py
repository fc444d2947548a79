"""Versioned tensor container: JSON header followed by a float32 payload.

Layout::

    magic     4 bytes   b"JSR\\x00"
    hlen      uint32 LE length of the header in bytes
    header    UTF-8 JSON, keys sorted
    payload   little-endian float32 values, tensors back to back

The header carries ``version``, ``kind``, free-form ``meta`` and a
``tensors`` list of ``{name, shape, offset}`` entries (offset in floats).
Writing the same content twice produces identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .imaging import PathLike

MAGIC = b"JSR\x00"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    """The file is not a valid tensor container."""


class IncompatibleVersionError(ContainerError):
    pass


def encode(tensors: Mapping[str, torch.Tensor], kind: str, meta: dict[str, Any] | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.size
    header = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta or {},
        "tensors": entries,
        "count": offset,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)


def decode(blob: bytes, source: str = "<bytes>") -> tuple[dict[str, Any], "OrderedDict[str, torch.Tensor]"]:
    """Parse a container. Nothing is returned unless the whole blob is valid."""
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise ContainerError(f"{source}: not a tensor container (bad magic)")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if 8 + hlen > len(blob):
        raise ContainerError(f"{source}: truncated header")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{source}: corrupt header ({exc})") from exc
    if not isinstance(header, dict) or "version" not in header:
        raise ContainerError(f"{source}: header has no version field")
    if header["version"] != FORMAT_VERSION:
        raise IncompatibleVersionError(
            f"{source}: container version {header['version']} is not supported "
            f"(this build reads version {FORMAT_VERSION})"
        )
    payload = blob[8 + hlen:]
    count = header.get("count")
    if not isinstance(count, int) or len(payload) != 4 * count:
        raise ContainerError(
            f"{source}: payload holds {len(payload)} bytes, header declares {count} floats"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    try:
        for e in header["tensors"]:
            size = int(np.prod(e["shape"], dtype=np.int64))
            start = e["offset"]
            if start < 0 or start + size > count:
                raise ContainerError(f"{source}: tensor {e['name']} lies outside the payload")
            arr = flat[start:start + size].astype(np.float32).reshape(e["shape"])
            tensors[e["name"]] = torch.from_numpy(arr)
    except (KeyError, TypeError) as exc:
        raise ContainerError(f"{source}: malformed tensor table ({exc})") from exc
    if not np.all(np.isfinite(flat)):
        raise ContainerError(f"{source}: payload contains non-finite values")
    return header, tensors


def write_atomic(path: PathLike, blob: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path: PathLike, tensors: Mapping[str, torch.Tensor], kind: str, meta: dict | None = None) -> None:
    write_atomic(path, encode(tensors, kind, meta))


def load(path: PathLike, kind: str | None = None):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ContainerError(f"{path}: cannot read ({exc.strerror})") from exc
    header, tensors = decode(blob, source=str(path))
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"{path}: expected a '{kind}' file, found '{header.get('kind')}'")
    return header, tensors
