"""Named-tensor container ("PFUS") and model checkpoints built on it.

Layout, all integers little-endian u32::

    b"PFUS" | version | count | count * (name_len | name | rank | dims... | f64 payload)

A checkpoint stores the model parameters plus one extra entry, ``__meta__``,
whose payload is the UTF-8 bytes of a JSON document (architecture descriptor
and config echo), one byte per f64 element.  That keeps the file
self-describing without changing the container format.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError, FormatError

MAGIC = b"PFUS"
VERSION = 1
META_KEY = "__meta__"


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() emits C order; keeps rank 0
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> dict[str, np.ndarray]:
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated at byte {pos} (wanted {n} more)")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, not a PFUS file")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported PFUS version {version} (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        try:
            name = take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{path}: tensor name is not UTF-8") from e
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
        out[name] = data.reshape(dims)
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes after last tensor")
    return out


def _encode_meta(meta: dict) -> np.ndarray:
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64)


def _decode_meta(arr: np.ndarray) -> dict:
    return json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))


def checkpoint_save(path, model, config: dict | None = None) -> None:
    """Write ``model`` parameters, its architecture descriptor and ``config``."""
    meta = {"architecture": model.arch.to_dict(), "config": config or {}}
    tensors = dict(sorted(model.params.items()))
    tensors[META_KEY] = _encode_meta(meta)
    write_tensors(path, tensors)


def checkpoint_load(path):
    """Return ``(model, config)`` from a file written by :func:`checkpoint_save`."""
    from .model import FusionModel, ModelConfig

    tensors = read_tensors(path)
    if META_KEY not in tensors:
        raise FormatError(f"{path}: no architecture descriptor")
    meta = _decode_meta(tensors.pop(META_KEY))
    arch = ModelConfig.from_dict(meta["architecture"])
    model = FusionModel(arch, tensors)
    expected = FusionModel.init(arch, seed=0).params
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise FormatError(f"{path}: parameter set mismatch (missing {missing[:3]}, extra {extra[:3]})")
    for k, v in expected.items():
        if v.shape != tensors[k].shape:
            raise FormatError(f"{path}: parameter {k} has shape {tensors[k].shape}, expected {v.shape}")
    return model, meta.get("config", {})
