"""Named-tensor binary checkpoint format.

Layout: magic "UVGU", u32 version = 1, u32 entry count, then per entry:
u16 name length, UTF-8 name, u8 dtype code (0 = f32), u8 rank, u32 dims,
raw little-endian values. A CRC32 of all preceding bytes trails the file.
Writes are atomic (temp file + rename).
"""

import os
import struct
import zlib

import numpy as np

from .errors import CheckpointError

MAGIC = b"UVGU"
VERSION = 1
DTYPE_F32 = 0


def save(path, tensors):
    """Write an ordered {name: float32 array} mapping."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load(path):
    """Read back an ordered {name: float32 array} mapping, CRC-verified."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    body, crc_stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if (zlib.crc32(body) & 0xFFFFFFFF) != crc_stored:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupt or truncated")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    off = 12
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + name_len].decode("utf-8")
            off += name_len
            dtype_code, rank = struct.unpack_from("<BB", body, off)
            off += 2
            if dtype_code != DTYPE_F32:
                raise CheckpointError(f"{path}: unknown dtype code {dtype_code} for {name}")
            dims = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
            if name in tensors:
                raise CheckpointError(f"{path}: duplicate tensor name {name}")
            tensors[name] = np.ascontiguousarray(arr)
    except struct.error as exc:
        raise CheckpointError(f"{path}: malformed entry table: {exc}") from exc
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after last entry")
    return tensors
