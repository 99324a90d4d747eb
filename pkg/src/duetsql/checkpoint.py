"""Byte-stable checkpoint container: JSON manifest + named float64 tensors.

Layout: magic, format version, manifest length, manifest JSON (sorted keys),
then each tensor in sorted name order as (name, shape, little-endian float64
payload). No timestamps or compression, so identical inputs produce identical
bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .numerics import Tensor

MAGIC = b"DSQLCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, manifest: dict, tensors: dict) -> None:
    names = sorted(tensors)
    manifest = dict(manifest)
    manifest["format_version"] = FORMAT_VERSION
    manifest["tensor_names"] = names
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for name in names:
            t = tensors[name]
            arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, mlen = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        tensors: dict[str, np.ndarray] = {}
        for _ in manifest["tensor_names"]:
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape).copy()
            tensors[name] = data
    return manifest, tensors


def restore_into(registry: dict[str, Tensor], tensors: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into an existing parameter registry by name."""
    missing = set(registry) - set(tensors)
    extra = set(tensors) - set(registry)
    if missing or extra:
        raise CheckpointError(f"registry/tensor name mismatch (missing={sorted(missing)[:4]}, "
                              f"extra={sorted(extra)[:4]})")
    for name, arr in tensors.items():
        if registry[name].data.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}: "
                                  f"{registry[name].data.shape} vs {arr.shape}")
        registry[name].data[...] = arr
