"""The ``SGCK`` checkpoint container.

Byte layout (all integers little-endian)::

    4   magic  b"SGCK"
    1   u8     format version (1)
    4   u32    metadata length M
    M   bytes  UTF-8 JSON metadata (architecture config, step counters, ...)
    4   u32    entry count E
    then E entries, each:
        2   u16    name length L
        L   bytes  UTF-8 name
        1   u8     flags (bit 0: Adam state follows)
        1   u8     ndim D
        4*D u32    shape
        4*n f32    values, row-major, n = prod(shape)
        if flags & 1:
            4   u32  Adam step counter
            4*n f32  first moment
            4*n f32  second moment

Parameters and buffers (batch-norm running statistics) share the table;
buffers simply never carry Adam state.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .layers import Module, Param

MAGIC = b"SGCK"
VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Entry:
    value: np.ndarray
    adam: tuple[int, np.ndarray, np.ndarray] | None = None


def save_checkpoint(path, entries: dict[str, Entry], metadata: dict | None = None):
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<BI", VERSION, len(meta)), meta, struct.pack("<I", len(entries))]
    for name, entry in entries.items():
        raw = name.encode("utf-8")
        value = np.asarray(entry.value)
        flags = 1 if entry.adam is not None else 0
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", flags, value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(value.astype(_F32).tobytes())
        if entry.adam is not None:
            step, m, v = entry.adam
            parts.append(struct.pack("<I", step))
            parts.append(np.asarray(m).astype(_F32).tobytes())
            parts.append(np.asarray(v).astype(_F32).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict[str, Entry]]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an SGCK checkpoint")
    try:
        version, meta_len = struct.unpack_from("<BI", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 9
        metadata = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        entries = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + name_len].decode("utf-8")
            pos += name_len
            flags, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))

            def take(pos=None):
                return np.frombuffer(buf, dtype=_F32, count=n, offset=pos).reshape(shape).astype(np.float32)

            value = take(pos)
            pos += 4 * n
            adam = None
            if flags & 1:
                (step,) = struct.unpack_from("<I", buf, pos)
                pos += 4
                m = take(pos)
                pos += 4 * n
                v = take(pos)
                pos += 4 * n
                adam = (step, m, v)
            entries[name] = Entry(value, adam)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return metadata, entries


def module_entries(module: Module, prefix="", with_adam=False) -> dict[str, Entry]:
    out = {}
    for name, p in module.named_parameters():
        adam = (p.step, p.m, p.v) if with_adam else None
        out[prefix + name] = Entry(p.data, adam)
    for name, b in module.named_buffers():
        out[prefix + name] = Entry(b)
    return out


def restore_module(module: Module, entries: dict[str, Entry], prefix=""):
    """Load values (and Adam state when present) into ``module`` in place."""
    for name, p in module.named_parameters():
        entry = entries.get(prefix + name)
        if entry is None:
            raise CheckpointError(f"checkpoint lacks parameter {prefix + name}")
        if entry.value.shape != p.shape:
            raise CheckpointError(f"{prefix + name}: shape {entry.value.shape} != {p.shape}")
        p.data[...] = entry.value
        if entry.adam is not None and isinstance(p, Param):
            p.step, m, v = entry.adam
            p.m[...] = m
            p.v[...] = v
    for name, b in module.named_buffers():
        entry = entries.get(prefix + name)
        if entry is None:
            raise CheckpointError(f"checkpoint lacks buffer {prefix + name}")
        b[...] = entry.value
