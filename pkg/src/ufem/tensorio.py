"""Named-tensor container used for backbone weights, nets and checkpoints.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"UFEMNT01"
    8       8     uint64 manifest length M
    16      M     manifest, UTF-8 JSON
    16+M    ...   payload: raw tensor bytes, concatenated in manifest order

The manifest is a JSON object::

    {
      "format": 1,
      "architecture_id": str,
      "byteorder": "little" | "big",
      "payload_sha256": hex digest of the payload bytes,
      "payload_nbytes": int,
      "tensors": [{"name", "dtype": "float32", "shape", "offset", "nbytes"}, ...],
      "meta": {...}          # free-form, JSON-serializable
    }

Tensor ``offset`` is relative to the start of the payload. Only float32 is
written; ``byteorder`` records the layout of the payload so files written on
(or for) big-endian hosts are converted explicitly on load.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

MAGIC = b"UFEMNT01"
_HEADER = struct.Struct("<8sQ")


class ContainerError(ValueError):
    """Raised for corrupt, truncated or inconsistent container files."""


def _dtype(byteorder: str) -> np.dtype:
    if byteorder == "little":
        return np.dtype("<f4")
    if byteorder == "big":
        return np.dtype(">f4")
    raise ContainerError(f"unknown byteorder {byteorder!r}")


def encode(
    tensors: Mapping[str, torch.Tensor | np.ndarray],
    architecture_id: str,
    meta: Mapping[str, Any] | None = None,
    byteorder: str = "little",
) -> bytes:
    dt = _dtype(byteorder)
    entries = []
    chunks = []
    offset = 0
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.asarray(value, dtype=np.float32).astype(dt, order="C")
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": "float32",
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format": 1,
        "architecture_id": architecture_id,
        "byteorder": byteorder,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "payload_nbytes": len(payload),
        "tensors": entries,
        "meta": dict(meta or {}),
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, len(blob)) + blob + payload


def decode(data: bytes) -> tuple[OrderedDict[str, torch.Tensor], dict]:
    """Parse container bytes into (tensors, manifest).

    Nothing is returned unless the whole payload verifies against its digest.
    """
    if len(data) < _HEADER.size:
        raise ContainerError("truncated container: missing header")
    magic, mlen = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ContainerError("not a named-tensor container (bad magic)")
    end = _HEADER.size + mlen
    if len(data) < end:
        raise ContainerError("truncated container: manifest incomplete")
    try:
        manifest = json.loads(data[_HEADER.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt manifest: {exc}") from None
    for key in ("byteorder", "payload_sha256", "payload_nbytes", "tensors"):
        if key not in manifest:
            raise ContainerError(f"corrupt manifest: missing {key!r}")
    payload = data[end:]
    if len(payload) != manifest["payload_nbytes"]:
        raise ContainerError(
            f"payload digest mismatch: expected {manifest['payload_nbytes']} bytes, "
            f"found {len(payload)}"
        )
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise ContainerError("payload digest mismatch")
    dt = _dtype(manifest["byteorder"])
    out: OrderedDict[str, torch.Tensor] = OrderedDict()
    for e in manifest["tensors"]:
        if e.get("dtype") != "float32":
            raise ContainerError(f"unsupported dtype {e.get('dtype')!r} for {e['name']}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * 4 != e["nbytes"] or e["offset"] + e["nbytes"] > len(payload):
            raise ContainerError(f"corrupt manifest entry for tensor {e['name']!r}")
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=e["offset"])
        # explicit conversion to native float32
        arr = arr.astype(np.float32).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.copy())
    return out, manifest


def save(path: str | os.PathLike, tensors, architecture_id: str, meta=None, byteorder="little") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode(tensors, architecture_id, meta, byteorder)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return path


def load(path: str | os.PathLike) -> tuple[OrderedDict[str, torch.Tensor], dict]:
    return decode(Path(path).read_bytes())


def state_digest(tensors: Mapping[str, torch.Tensor]) -> str:
    """SHA-256 over names and raw bytes; used as a parameter checksum."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode("utf-8"))
        h.update(str(tuple(t.shape)).encode("ascii"))
        h.update(t.numpy().tobytes())
    return h.hexdigest()
