"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"URSCT1"                      magic
    u32 version                    = 1
    tensor block: parameters
    tensor block: optimizer moments
    u64 step, u64 epoch
    u64 rng blob length, rng blob (JSON of the bit-generator state)
    u32 config length, config (UTF-8 JSON snapshot of model/train config)

    tensor block := u32 count, then per tensor:
        u16 name length, UTF-8 name, u8 dtype tag (0 = f32, 1 = f64),
        u8 ndim, u32 dims[ndim], raw little-endian element data
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, FileIOError

MAGIC = b"URSCT1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass
class Checkpoint:
    params: OrderedDict[str, np.ndarray]
    moments: OrderedDict[str, np.ndarray] = field(default_factory=OrderedDict)
    step: int = 0
    epoch: int = 0
    rng_state: bytes = b""
    config: dict = field(default_factory=dict)

    def equals(self, other: Checkpoint) -> bool:
        """Bitwise equality of every tensor and counter."""
        def same(a, b):
            return list(a) == list(b) and all(
                a[k].dtype == b[k].dtype and a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a
            )

        return (
            same(self.params, other.params)
            and same(self.moments, other.moments)
            and (self.step, self.epoch, self.rng_state) == (other.step, other.epoch, other.rng_state)
        )


def _write_tensors(out: bytearray, tensors: dict[str, np.ndarray]) -> None:
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        out += struct.pack("<H", len(raw_name)) + raw_name
        out += struct.pack("<BB", _TAGS[arr.dtype], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")


def encode(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    _write_tensors(out, ckpt.params)
    _write_tensors(out, ckpt.moments)
    out += struct.pack("<QQ", ckpt.step, ckpt.epoch)
    out += struct.pack("<Q", len(ckpt.rng_state)) + ckpt.rng_state
    cfg = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(cfg)) + cfg
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint truncated")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensors(self) -> OrderedDict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = OrderedDict()
        for _ in range(count):
            (n,) = self.unpack("<H")
            try:
                name = self.take(n).decode("utf-8")
            except UnicodeDecodeError:
                raise FormatError("tensor name is not UTF-8") from None
            tag, ndim = self.unpack("<BB")
            if tag not in _DTYPES:
                raise FormatError(f"{name}: unknown dtype tag {tag}")
            dims = self.unpack(f"<{ndim}I")
            dtype = _DTYPES[tag]
            size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            data = np.frombuffer(self.take(size * dtype.itemsize), dtype=dtype)
            out[name] = data.reshape(dims).astype(dtype.newbyteorder("="))
        return out


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    params = r.tensors()
    moments = r.tensors()
    step, epoch = r.unpack("<QQ")
    (n,) = r.unpack("<Q")
    rng_state = r.take(n)
    (n,) = r.unpack("<I")
    try:
        config = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("config snapshot is not valid JSON") from None
    if r.pos != len(buf):
        raise FormatError("trailing bytes after checkpoint")
    return Checkpoint(params, moments, step, epoch, rng_state, config)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(encode(ckpt))
        tmp.replace(path)
    except OSError as exc:
        raise FileIOError(f"{path}: cannot write checkpoint ({exc})") from None


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FileIOError(f"{path}: cannot read checkpoint ({exc})") from None
    return decode(buf)
