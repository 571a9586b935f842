"""Binary checkpoint format shared by the velocity and score networks.

Layout (little-endian)::

    8s   magic ("FMCKPT01" or "SMCKPT01")
    u32  JSON header length L
    L    UTF-8 JSON: {"network": NetworkConfig fields, "meta": {...}}
    u32  parameter count
    per parameter, in declaration order:
        u16 name length, name bytes, u8 ndim, u32 * ndim dims,
        float64 data (row-major)
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .unet import NetworkConfig, VelocityNet

FM_MAGIC = b"FMCKPT01"
SM_MAGIC = b"SMCKPT01"


def save_checkpoint(model: VelocityNet, path, magic: bytes = FM_MAGIC, meta: dict | None = None) -> None:
    head = json.dumps({"network": asdict(model.config), "meta": meta or {}}, sort_keys=True).encode()
    params = list(model.named_parameters())
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        f.write(struct.pack("<I", len(params)))
        for name, p in params:
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", p.ndim))
            f.write(struct.pack(f"<{p.ndim}I", *p.shape))
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated while reading {what}", self.pos)
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path, magic: bytes = FM_MAGIC) -> tuple[VelocityNet, dict]:
    """Returns ``(model, meta)``."""
    r = _Reader(Path(path).read_bytes())
    got = r.take(8, "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
    (hlen,) = r.unpack("<I", "header length")
    start = r.pos
    try:
        head = json.loads(r.take(hlen, "header").decode())
        model = VelocityNet(NetworkConfig(**head["network"]))
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}", start) from exc
    expected = model.parameters()
    (count,) = r.unpack("<I", "parameter count")
    if count != len(expected):
        raise FormatError(f"checkpoint holds {count} tensors, config implies {len(expected)}", r.pos - 4)
    for _ in range(count):
        at = r.pos
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode(errors="replace")
        (ndim,) = r.unpack("<B", "ndim")
        shape = r.unpack(f"<{ndim}I", "shape")
        if name not in expected or expected[name].shape != tuple(shape):
            raise FormatError(f"unexpected tensor {name!r} with shape {shape}", at)
        n = int(np.prod(shape)) if shape else 1
        expected[name][...] = np.frombuffer(r.take(8 * n, name), dtype="<f8").reshape(shape)
    if r.pos != len(r.raw):
        raise FormatError(f"{len(r.raw) - r.pos} trailing bytes", r.pos)
    return model, head.get("meta", {})
