"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic    8 bytes  b"FRCKPT\\x00\\x01"
    version  u32
    meta     u64 length + UTF-8 JSON
    count    u32
    count x  [u32 name length, name, u8 ndim, ndim x u64 dims, float64 payload]
"""
import json
import os
import struct

import numpy as np

MAGIC = b"FRCKPT\x00\x01"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, meta, tensors):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    (meta_len,) = struct.unpack_from("<Q", data, off)
    off += 8
    meta = json.loads(data[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        n = int(np.prod(shape))
        tensors[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return meta, tensors


def trainer_checkpoint(trainer, extra_meta=None):
    """Collect weights, velocities, pipeline state and counters from a trainer."""
    meta, tensors = trainer.extra_state()
    meta = {"trainer": trainer.name, "iteration": trainer.iteration,
            "pipeline_state": meta, **(extra_meta or {})}
    out = {f"param/{i}": p for i, p in enumerate(trainer.net.params())}
    out.update({f"velocity/{i}": v for i, v in enumerate(trainer.optimizer.velocity)})
    out.update(tensors)
    return meta, out


def restore_trainer(trainer, meta, tensors):
    if meta["trainer"] != trainer.name:
        raise CheckpointError(f"checkpoint is for trainer {meta['trainer']!r}, not {trainer.name!r}")
    for i, p in enumerate(trainer.net.params()):
        src = tensors[f"param/{i}"]
        if src.shape != p.shape:
            raise CheckpointError(f"param {i}: shape {src.shape} != {p.shape}")
        p[...] = src
    for i, v in enumerate(trainer.optimizer.velocity):
        v[...] = tensors[f"velocity/{i}"]
    trainer.load_extra_state(meta["pipeline_state"], tensors)
    trainer.iteration = meta["iteration"]
