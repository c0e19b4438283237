"""Binary containers for checkpoints, payloads and dataset fixtures.

Layout (all integers little-endian)::

    magic    4 bytes   b"FPKC" checkpoint | b"FPKP" payload
    version  u16       currently 1
    [payload only] strategy: u16 length + UTF-8, num_samples: u64
    count    u32       number of entries
    entry*   u16 path length, UTF-8 path, u8 ndim, ndim x u64 dims,
             prod(dims) x float64 (IEEE-754, little-endian, row-major)

Round trips are bit-exact.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import ProtocolError

VERSION = 1
CHECKPOINT_MAGIC = b"FPKC"
PAYLOAD_MAGIC = b"FPKP"
_F64 = np.dtype("<f8")


def _write_str(buf, s):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _read_exact(buf, n):
    raw = buf.read(n)
    if len(raw) != n:
        raise ProtocolError("truncated container")
    return raw


def _read_str(buf):
    (n,) = struct.unpack("<H", _read_exact(buf, 2))
    return _read_exact(buf, n).decode("utf-8")


def _write_entries(buf, tensors):
    buf.write(struct.pack("<I", len(tensors)))
    for path, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        _write_str(buf, path)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_F64).tobytes())


def _read_entries(buf):
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    out = {}
    for _ in range(count):
        path = _read_str(buf)
        (ndim,) = struct.unpack("<B", _read_exact(buf, 1))
        shape = struct.unpack(f"<{ndim}Q", _read_exact(buf, 8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(_read_exact(buf, 8 * size), dtype=_F64)
        out[path] = data.astype(np.float64).reshape(shape)
    return out


def _header(buf, magic):
    got = _read_exact(buf, 4)
    if got != magic:
        raise ProtocolError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<H", _read_exact(buf, 2))
    if version != VERSION:
        raise ProtocolError(f"unsupported container version {version}")


def dumps_tensors(tensors) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", VERSION))
    _write_entries(buf, tensors)
    return buf.getvalue()


def loads_tensors(raw: bytes) -> dict:
    buf = io.BytesIO(raw)
    _header(buf, CHECKPOINT_MAGIC)
    out = _read_entries(buf)
    if buf.read(1):
        raise ProtocolError("trailing bytes after checkpoint")
    return out


def save_checkpoint(path, tensors):
    Path(path).write_bytes(dumps_tensors(tensors))


def load_checkpoint(path) -> dict:
    return loads_tensors(Path(path).read_bytes())


def encode_wire(payload) -> bytes:
    buf = io.BytesIO()
    buf.write(PAYLOAD_MAGIC)
    buf.write(struct.pack("<H", VERSION))
    _write_str(buf, payload.strategy)
    buf.write(struct.pack("<Q", payload.num_samples))
    _write_entries(buf, payload.tensors)
    return buf.getvalue()


def decode_wire(raw: bytes):
    from .peft import Payload

    buf = io.BytesIO(raw)
    _header(buf, PAYLOAD_MAGIC)
    strategy = _read_str(buf)
    (num_samples,) = struct.unpack("<Q", _read_exact(buf, 8))
    tensors = _read_entries(buf)
    if buf.read(1):
        raise ProtocolError("trailing bytes after payload")
    return Payload(strategy, tensors, num_samples)


def save_dataset(path, dataset):
    save_checkpoint(path, {
        "images": dataset.images,
        "labels": dataset.labels.astype(np.float64),
        "num_classes": np.array([dataset.num_classes], dtype=np.float64),
    })


def load_dataset(path, split="train"):
    from .data import Dataset

    t = load_checkpoint(path)
    return Dataset(t["images"], t["labels"].astype(np.int64), int(t["num_classes"][0]), split)
