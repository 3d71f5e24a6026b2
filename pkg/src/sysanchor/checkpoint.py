"""Binary weight container.

Layout, all little-endian:

    magic   4 bytes  "CLRX"
    version u32
    count   u64                       number of tensors
    per tensor:
        name_len u32, name UTF-8
        dtype    u8   (0 = float32)
        rank     u8
        dims     u64 * rank
        payload  raw little-endian values
    checksum u32   CRC-32 of everything between the count field and here

Round-trips are bitwise; backbone and adapter sections are told apart
by name prefix. A checksum mismatch refuses to load with ChecksumError.
"""

import struct
import zlib

import numpy as np

MAGIC = b"CLRX"
VERSION = 1
_DTYPES = {0: np.dtype("<f4")}


class CheckpointError(Exception):
    """Malformed or unreadable checkpoint."""


class ChecksumError(CheckpointError):
    """Stored checksum does not match the tensor records."""


def save_tensors(path, tensors):
    """Write named float32 arrays; insertion order is preserved."""
    body = bytearray()
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name!r} is {arr.dtype}; container stores float32 only")
        encoded = name.encode("utf-8")
        body += struct.pack("<I", len(encoded))
        body += encoded
        body += struct.pack("<BB", 0, arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    blob = MAGIC + struct.pack("<IQ", VERSION, len(tensors)) + bytes(body)
    blob += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(blob)


def load_tensors(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a CLRX container")
    version, count = struct.unpack_from("<IQ", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    body = blob[16:-4]
    (stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumError(f"{path}: checksum mismatch (stored {stored:#x}, computed {actual:#x})")
    tensors = {}
    off = 0
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off : off + name_len].decode("utf-8")
        off += name_len
        dtype_code, rank = struct.unpack_from("<BB", body, off)
        off += 2
        if dtype_code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {dtype_code}")
        dims = struct.unpack_from(f"<{rank}Q", body, off)
        off += 8 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(body, dtype=_DTYPES[dtype_code], count=n, offset=off).reshape(dims)
        off += n * 4
        tensors[name] = arr.copy()
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after the last tensor")
    return tensors


def split_sections(tensors):
    """(backbone, adapter) dicts with their prefixes stripped."""
    backbone, adapters = {}, {}
    for name, arr in tensors.items():
        if name.startswith("backbone."):
            backbone[name[len("backbone."):]] = arr
        elif name.startswith("adapter."):
            adapters[name[len("adapter."):]] = arr
        else:
            raise CheckpointError(f"tensor {name!r} belongs to no known section")
    return backbone, adapters


def save_model(m, path):
    save_tensors(path, m.state())


def load_model(config, path):
    """Rebuild a model from a container written by save_model."""
    from .model import build_model

    backbone, adapters = split_sections(load_tensors(path))
    m = build_model(config, seed=0, backbone_weights=backbone)
    stored = dict(adapters)
    for name, tensor in m.adapter_parameters():
        key = name[len("adapter."):]
        if key not in stored:
            raise CheckpointError(f"checkpoint missing adapter tensor {key!r}")
        arr = stored.pop(key)
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"adapter tensor {key!r} has shape {arr.shape}, expected {tensor.data.shape}"
            )
        tensor.data = arr.astype(tensor.data.dtype)
    if stored:
        raise CheckpointError(f"checkpoint has unexpected adapter tensors: {sorted(stored)}")
    return m
