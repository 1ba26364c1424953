"""Binary parameter checkpoints.

Layout (all integers unsigned, little-endian)::

    magic     8 bytes   b"ORSFCKPT"
    version   u32       currently 1
    meta_len  u32       length of the UTF-8 JSON metadata object
    meta      meta_len bytes
    count     u32       number of records
    record *  count:
        name_len  u16
        name      name_len bytes, UTF-8
        ndim      u8
        dims      ndim x u32
        payload   prod(dims) x f64, row-major

Metadata is free-form JSON; the VAE checkpoint stores ``{"frozen": true}``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, MissingCheckpoint

MAGIC = b"ORSFCKPT"
VERSION = 1


def save(path, arrays: dict, meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.array(arr, dtype="<f8", order="C")  # keeps 0-d arrays 0-d
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load(path) -> tuple[dict, dict]:
    """Return ``(arrays, meta)``."""
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, meta_len = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 16
    meta = json.loads(buf[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64)
            off += 8 * n
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from exc
    return arrays, meta


def save_module(path, module, meta: dict | None = None, extra: dict | None = None) -> None:
    meta = dict(meta or {})
    meta.setdefault("frozen", bool(getattr(module, "frozen", False)))
    arrays = dict(module.state_dict())
    if extra:
        arrays.update(extra)
    save(path, arrays, meta)


def load_module(path, module) -> dict:
    """Load parameters into ``module``; re-freezes it if the file says so."""
    arrays, meta = load(path)
    own = {n for n, _ in module.named_parameters()}
    module.load_state_dict({n: a for n, a in arrays.items() if n in own})
    if meta.get("frozen"):
        module.freeze()
    return meta
