"""Versioned binary container for named tensors plus an architecture description.

Layout (all integers little-endian)::

    magic        8 bytes   b"VMSKCKPT"
    version      uint32
    payload_len  uint64
    payload      payload_len bytes
    crc32        uint32    zlib.crc32 of payload

    payload := spec_len uint32, spec JSON (utf-8), count uint32, count records
    record  := name_len uint16, name (utf-8), dtype code uint8, ndim uint8,
               ndim x uint32 extents, row-major little-endian element bytes
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"VMSKCKPT"
VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODE_FOR = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.int64): 3}


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def encode_checkpoint(spec: dict, tensors: dict[str, np.ndarray]) -> bytes:
    spec_bytes = json.dumps(spec, sort_keys=True).encode()
    parts = [struct.pack("<I", len(spec_bytes)), spec_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODE_FOR.get(arr.dtype.newbyteorder("="))
        if code is None:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        name_b = name.encode()
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())
    payload = b"".join(parts)
    return MAGIC + struct.pack("<IQ", VERSION, len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))


def decode_checkpoint(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 8 or blob[:8] != MAGIC:
        raise CheckpointMagicError(f"bad checkpoint magic {bytes(blob[:8])!r}")
    if len(blob) < 20:
        raise CheckpointTruncatedError("checkpoint header is incomplete")
    version, length = struct.unpack_from("<IQ", blob, 8)
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this reader supports {VERSION}")
    if len(blob) < 20 + length + 4:
        raise CheckpointTruncatedError(f"payload declares {length} bytes but the file ends early")
    if len(blob) > 20 + length + 4:
        raise CheckpointTruncatedError("unexpected bytes after the checksum")
    payload = blob[20:20 + length]
    (crc,) = struct.unpack_from("<I", blob, 20 + length)
    if zlib.crc32(payload) != crc:
        raise CheckpointChecksumError("checkpoint payload checksum mismatch")

    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(payload):
            raise CheckpointTruncatedError("record runs past the end of the payload")
        chunk = payload[pos:pos + n]
        pos += n
        return chunk

    (spec_len,) = struct.unpack("<I", take(4))
    spec = json.loads(take(spec_len).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"tensor {name!r} has unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = _DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    if pos != len(payload):
        raise CheckpointError("trailing bytes inside payload")
    return spec, tensors


def write_checkpoint(path, spec: dict, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(spec, tensors))
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())
