"""Binary checkpoint format.

Layout: the 8-byte magic ``TVTCKPT1``, a little-endian uint64 manifest
length, a UTF-8 JSON manifest ``{"model": {...}, "tensors": [{"name",
"dtype", "shape"}, ...]}``, then each tensor's raw little-endian bytes in
manifest order.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .vit import ModelConfig

MAGIC = b"TVTCKPT1"
_DTYPES = {"float64": "<f8", "float32": "<f4"}


class CheckpointError(ValueError):
    """A checkpoint is malformed or does not match the model configuration."""


def dumps(params: dict, model_cfg: ModelConfig, dtype: str = "float64") -> bytes:
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported checkpoint dtype {dtype!r}")
    arrays = {name: np.asarray(getattr(t, "values", t)) for name, t in params.items()}
    manifest = {
        "model": dataclasses.asdict(model_cfg),
        "tensors": [{"name": n, "dtype": dtype, "shape": list(a.shape)} for n, a in arrays.items()],
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(a.astype(_DTYPES[dtype]).tobytes() for a in arrays.values())
    return MAGIC + struct.pack("<Q", len(head)) + head + body


def save(path, params: dict, model_cfg: ModelConfig, dtype: str = "float64") -> Path:
    path = Path(path)
    path.write_bytes(dumps(params, model_cfg, dtype))
    return path


def loads(data: bytes) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    if data[:8] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:8]!r}")
    if len(data) < 16:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        manifest = json.loads(data[16 : 16 + n].decode())
        model_cfg = ModelConfig(**manifest["model"])
        entries = manifest["tensors"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from exc
    arrays: dict[str, np.ndarray] = {}
    offset = 16 + n
    for e in entries:
        dt = np.dtype(_DTYPES.get(e["dtype"], "V"))
        if dt.kind != "f":
            raise CheckpointError(f"tensor {e['name']}: unsupported dtype {e['dtype']!r}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = offset + count * dt.itemsize
        if end > len(data):
            raise CheckpointError(f"tensor {e['name']}: checkpoint truncated")
        arrays[e["name"]] = np.frombuffer(data[offset:end], dtype=dt).astype(np.float64).reshape(e["shape"])
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes after last tensor")
    return model_cfg, arrays


def load(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())


def validate(arrays: dict[str, np.ndarray], expected: dict) -> None:
    """Raise :class:`CheckpointError` unless names and shapes match ``expected`` exactly."""
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, t in expected.items():
        shape = tuple(getattr(t, "shape", np.shape(t)))
        if arrays[name].shape != shape:
            raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape} != model shape {shape}")
