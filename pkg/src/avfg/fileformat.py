"""Binary clip and checkpoint files.

Clip layout (all integers little-endian)::

    b"AVFG" | version u16 | label u8 | provenance u8 |
    payload: for audio then visual: rank u32, extents u32 * rank, float32 data |
    crc32(payload) u32

Checkpoint layout::

    b"AVFC" | version u16 | reserved u16 |
    payload: config length u32, config JSON utf-8, tensor count u32,
             per tensor: name length u16, name utf-8, dtype code u8,
                         rank u32, extents u32 * rank, raw data |
    crc32(payload) u32
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

CLIP_MAGIC = b"AVFG"
CLIP_VERSION = 1
CHECKPOINT_MAGIC = b"AVFC"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class FormatError(ValueError):
    """Base class; ``code`` identifies the failure kind."""

    code = 20


class BadMagicError(FormatError):
    code = 21


class VersionError(FormatError):
    code = 22


class ChecksumError(FormatError):
    code = 23


class TruncatedError(FormatError):
    code = 24


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"{self.what}: truncated at byte {self.pos}, needed {n} more")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def encode_array(arr: np.ndarray, dtype="<f4") -> bytes:
    arr = np.ascontiguousarray(arr, dtype=dtype)
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def decode_array(reader: _Reader, dtype="<f4") -> np.ndarray:
    (rank,) = reader.unpack("<I")
    if rank > 8:
        raise FormatError(f"{reader.what}: implausible tensor rank {rank}")
    shape = reader.unpack(f"<{rank}I") if rank else ()
    dtype = np.dtype(dtype)
    count = int(np.prod(shape)) if shape else 1
    raw = reader.take(count * dtype.itemsize)
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def _split_checked(buf: bytes, magic: bytes, version: int, header_len: int, what: str) -> tuple[bytes, bytes]:
    if len(buf) < 4:
        raise TruncatedError(f"{what}: file too short ({len(buf)} bytes)")
    if buf[:4] != magic:
        raise BadMagicError(f"{what}: bad magic {buf[:4]!r}, expected {magic!r}")
    if len(buf) < header_len + 4:
        raise TruncatedError(f"{what}: file too short ({len(buf)} bytes)")
    (found,) = struct.unpack("<H", buf[4:6])
    if found != version:
        raise VersionError(f"{what}: format version {found}, expected {version}")
    header, payload, crc = buf[:header_len], buf[header_len:-4], buf[-4:]
    (expected,) = struct.unpack("<I", crc)
    if zlib.crc32(payload) != expected:
        # a short payload usually shows up as a CRC mismatch; check declared sizes first
        _check_declared_lengths(payload, what)
        raise ChecksumError(f"{what}: CRC mismatch")
    return header, payload


def _check_declared_lengths(payload: bytes, what: str) -> None:
    """Best effort: report truncation instead of a checksum error when a clip payload is short."""
    r = _Reader(payload, what)
    try:
        for _ in range(2):
            decode_array(r)
    except TruncatedError:
        raise
    except Exception:  # noqa: BLE001 - not a clip payload, let the CRC error stand
        return


# -- clips -------------------------------------------------------------------


def encode_clip(audio: np.ndarray, visual: np.ndarray, label: int, provenance: int) -> bytes:
    header = CLIP_MAGIC + struct.pack("<HBB", CLIP_VERSION, label, provenance)
    payload = encode_array(audio) + encode_array(visual)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def decode_clip(buf: bytes, what: str = "clip") -> tuple[np.ndarray, np.ndarray, int, int]:
    header, payload = _split_checked(buf, CLIP_MAGIC, CLIP_VERSION, 8, what)
    label, provenance = struct.unpack("<BB", header[6:8])
    r = _Reader(payload, what)
    audio = decode_array(r)
    visual = decode_array(r)
    if r.pos != len(payload):
        raise FormatError(f"{what}: {len(payload) - r.pos} trailing bytes")
    return audio, visual, label, provenance


# -- checkpoints ---------------------------------------------------------------


def encode_checkpoint(config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode()
    parts = [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = np.dtype(arr.dtype).newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise FormatError(f"unsupported dtype {arr.dtype} for {name}")
        key = name.encode()
        parts += [struct.pack("<H", len(key)), key, struct.pack("<B", _DTYPE_CODES[dt]), encode_array(arr, dt)]
    payload = b"".join(parts)
    header = CHECKPOINT_MAGIC + struct.pack("<HH", CHECKPOINT_VERSION, 0)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def decode_checkpoint(buf: bytes, what: str = "checkpoint") -> tuple[dict, dict[str, np.ndarray]]:
    _, payload = _split_checked(buf, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, 8, what)
    r = _Reader(payload, what)
    (n,) = r.unpack("<I")
    config = json.loads(r.take(n).decode())
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (klen,) = r.unpack("<H")
        name = r.take(klen).decode()
        (code,) = r.unpack("<B")
        if code not in _CODE_DTYPES:
            raise FormatError(f"{what}: unknown dtype code {code} for {name}")
        tensors[name] = decode_array(r, _CODE_DTYPES[code])
    return config, tensors


def write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
