"""Versioned binary parameter checkpoints.

Layout: magic ``HCPM``, u32 format version, u32 header length n, n u32
dimension fields, u64 parameter count, then float64 little-endian values
of every parameter in declaration order.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"HCPM"
VERSION = 1
DIM_FIELDS = ("d_c", "d_f", "heads", "n_blocks", "enc_c1", "enc_c2")


def dims_of(cfg):
    return tuple(int(getattr(cfg, f)) for f in DIM_FIELDS)


def save_checkpoint(path, params, cfg):
    flat = np.concatenate([p.data.ravel() for p in params.values()]).astype("<f8")
    dims = dims_of(cfg)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())
    os.replace(tmp, path)


def read_checkpoint(path):
    """Return ``(dims, values)`` without touching any parameter dict."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 12
    dims = struct.unpack_from(f"<{n}I", raw, off)
    off += 4 * n
    (count,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if len(raw) - off != 8 * count:
        raise CheckpointError(f"{path}: expected {count} values, found {(len(raw) - off) / 8:g}")
    return tuple(dims), np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64)


def load_checkpoint(path, params, cfg):
    """Fill ``params`` in place; dims and sizes must match ``cfg``."""
    dims, values = read_checkpoint(path)
    want = dims_of(cfg)
    if dims != want:
        raise CheckpointError(f"checkpoint dims {dict(zip(DIM_FIELDS, dims))} do not match config "
                              f"{dict(zip(DIM_FIELDS, want))}")
    total = sum(p.size for p in params.values())
    if total != values.size:
        raise CheckpointError(f"checkpoint holds {values.size} values, model needs {total}")
    off = 0
    for p in params.values():
        p.data = values[off:off + p.size].reshape(p.shape).copy()
        off += p.size
    return params
