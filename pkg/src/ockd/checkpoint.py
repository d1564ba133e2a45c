"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"OCKD"                      magic
    u32 version                  currently 1
    u32 n, n bytes               header JSON (utf-8, sorted keys): kind, config, meta
    u32 count                    number of tensors
    per tensor:
        u16 n, n bytes           name (utf-8)
        u8 ndim, ndim * u32      shape
        prod(shape) * f64        row-major values
    32 bytes                     SHA-256 of everything above

Tensors are written in sorted name order, so ``save(load(b)) == b``.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .corpus import atomic_write
from .models import Encoder, EncoderConfig

MAGIC = b"OCKD"
VERSION = 1
KINDS = ("teacher", "student")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: EncoderConfig
    params: dict  # name -> ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CheckpointError(f"kind must be one of {KINDS}, got {self.kind!r}")

    @classmethod
    def from_encoder(cls, kind, encoder, meta=None):
        params = {k: v.data.copy() for k, v in encoder.params.items()}
        return cls(kind, encoder.config, params, dict(meta or {}))

    def to_encoder(self):
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in self.params.items()}
        return Encoder(self.config, params=params)

    def to_bytes(self):
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", VERSION))
        header = json.dumps(
            {"kind": self.kind, "config": self.config.to_dict(), "meta": self.meta},
            sort_keys=True,
            separators=(",", ":"),
        ).encode("utf-8")
        buf.write(struct.pack("<I", len(header)))
        buf.write(header)
        buf.write(struct.pack("<I", len(self.params)))
        for name in sorted(self.params):
            arr = np.asarray(self.params[name], dtype="<f8")
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes(order="C"))
        body = buf.getvalue()
        return body + hashlib.sha256(body).digest()

    @property
    def digest(self):
        return self.to_bytes()[-32:].hex()

    @classmethod
    def from_bytes(cls, data, source="<bytes>"):
        if len(data) < 4 + 4 + 32 or data[:4] != MAGIC:
            raise CheckpointError(f"{source}: not an OCKD checkpoint")
        body, digest = data[:-32], data[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise CheckpointError(f"{source}: digest mismatch (corrupt checkpoint)")
        view = memoryview(body)
        pos = 4

        def take(fmt):
            nonlocal pos
            size = struct.calcsize(fmt)
            vals = struct.unpack_from(fmt, view, pos)
            pos += size
            return vals

        (version,) = take("<I")
        if version != VERSION:
            raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
        (hlen,) = take("<I")
        header = json.loads(bytes(view[pos:pos + hlen]).decode("utf-8"))
        pos += hlen
        (count,) = take("<I")
        params = {}
        for _ in range(count):
            (nlen,) = take("<H")
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (ndim,) = take("<B")
            shape = take(f"<{ndim}I") if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(view, dtype="<f8", count=n, offset=pos).reshape(shape)
            pos += 8 * n
            params[name] = arr.astype(np.float64)
        if pos != len(body):
            raise CheckpointError(f"{source}: {len(body) - pos} trailing bytes")
        return cls(
            header["kind"],
            EncoderConfig.from_dict(header["config"]),
            params,
            header.get("meta", {}),
        )


def save(ckpt, path):
    atomic_write(path, ckpt.to_bytes())


def load(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    return Checkpoint.from_bytes(data, str(path))


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
