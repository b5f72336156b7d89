"""Flat binary checkpoint of named float64 tensors.

Layout (all integers little-endian):
    magic   8 bytes  b"PPIXCKPT"
    version u32      1
    count   u32
    entries, each:
        name_len u32, name bytes (utf-8)
        flags    u8   bit 0 = tunable
        ndim     u32
        dims     ndim x u64
        data     prod(dims) x f64 little-endian

Entries are written in parameter-tree order, so saving the same model
twice produces byte-identical files.
"""

from __future__ import annotations

import struct

import numpy as np

from .backbone import Model, ModelParams

MAGIC = b"PPIXCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed."""


class IncompatibleCheckpointError(ValueError):
    """Checkpoint does not match the model it is being applied to."""


def save_checkpoint(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params)))
        for name, tensor in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BI", 1 if tensor.requires_grad else 0, tensor.data.ndim))
            fh.write(struct.pack(f"<{tensor.data.ndim}Q", *tensor.data.shape))
            fh.write(tensor.data.astype("<f8").tobytes())


def load_checkpoint(path) -> list:
    """Read entries as (name, tunable, array) in file order."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        version, count = struct.unpack_from("<II", raw, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        pos = 16
        entries = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            flags, ndim = struct.unpack_from("<BI", raw, pos)
            pos += 5
            dims = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            size = int(np.prod(dims)) if ndim else 1
            data = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(dims)
            pos += 8 * size
            entries.append((name, bool(flags & 1), data.astype(np.float64)))
        if pos != len(raw):
            raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from exc
    return entries


def apply_checkpoint(model: Model, entries: list) -> None:
    """Load entry data into the model, validating names and shapes."""
    names = set(model.params.names())
    seen = set()
    for name, tunable, data in entries:
        if name not in names:
            raise IncompatibleCheckpointError(f"checkpoint tensor {name!r} not in model")
        tensor = model.params[name]
        if tensor.data.shape != data.shape:
            raise IncompatibleCheckpointError(
                f"{name}: checkpoint shape {data.shape} vs model {tensor.data.shape}"
            )
        tensor.data[...] = data
        tensor.set_requires_grad(tunable)
        seen.add(name)
    missing = names - seen
    if missing:
        raise IncompatibleCheckpointError(
            f"checkpoint is missing {len(missing)} tensors, e.g. {sorted(missing)[:3]}"
        )
