"""Binary checkpoint container.

Byte layout (all integers little-endian)::

    magic        8 bytes   b"CSFCKPT\\0"
    version      u32
    header_len   u32
    header       header_len bytes of UTF-8 JSON (sorted keys), followed by u32 crc32 of those bytes
    blocks       for each entry of header["blocks"], in order:
                     count * 8 bytes of float64 ('<f8', C order), then u32 crc32 of those bytes
    trailer      32 bytes sha256 of everything above

The header carries ``kind``, ``step``, ``seed``, free-form ``hyper`` and ``extra`` dicts,
and ``blocks`` = [[name, shape], ...].
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IncompatibleCheckpointError, IntegrityError

MAGIC = b"CSFCKPT\0"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    arrays: dict[str, np.ndarray]
    hyper: dict = field(default_factory=dict)
    step: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)


def to_bytes(ckpt: Checkpoint, version: int = FORMAT_VERSION) -> bytes:
    blocks = [[name, list(np.shape(a))] for name, a in ckpt.arrays.items()]
    header = {"kind": ckpt.kind, "step": int(ckpt.step), "seed": int(ckpt.seed),
              "hyper": ckpt.hyper, "extra": ckpt.extra, "blocks": blocks}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", version, len(hb)), hb, struct.pack("<I", zlib.crc32(hb))]
    for name, _ in blocks:
        data = np.ascontiguousarray(ckpt.arrays[name], dtype="<f8").tobytes()
        parts += [data, struct.pack("<I", zlib.crc32(data))]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise IntegrityError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    if len(raw) < 32 or hashlib.sha256(raw[:-32]).digest() != raw[-32:]:
        raise IntegrityError("checkpoint truncated or corrupted (sha256 mismatch)")
    body = raw[:-32]
    pos = 16
    hb = body[pos:pos + hlen]
    pos += hlen
    if len(hb) != hlen or pos + 4 > len(body) or struct.unpack_from("<I", body, pos)[0] != zlib.crc32(hb):
        raise IntegrityError("header checksum mismatch")
    pos += 4
    header = json.loads(hb.decode())
    arrays: dict[str, np.ndarray] = {}
    for name, shape in header["blocks"]:
        n = 8 * int(np.prod(shape, dtype=np.int64))
        data = body[pos:pos + n]
        pos += n
        if len(data) != n or pos + 4 > len(body) or struct.unpack_from("<I", body, pos)[0] != zlib.crc32(data):
            raise IntegrityError(f"block {name!r} checksum mismatch")
        pos += 4
        arrays[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(body):
        raise IntegrityError("trailing bytes after last block")
    return Checkpoint(header["kind"], arrays, header["hyper"], header["step"], header["seed"], header["extra"])


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
