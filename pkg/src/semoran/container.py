"""The ``SEMORAN1`` binary container shared by datasets and checkpoints.

Layout (little-endian)::

    b"SEMORAN1"  magic
    u32          format version
    u32          entry count
    entries      u16 name length, UTF-8 name, u8 rank, u32 per dim, f32 payload

Non-array metadata travels as a rank-1 entry named ``__meta__`` holding the
UTF-8 bytes of a JSON object, one byte per f32 (exact for 0..255).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"SEMORAN1"
FORMAT_VERSION = 1
META_ENTRY = "__meta__"


class ContainerError(ValueError):
    """Raised for any malformed container. ``code`` is a stable machine-readable tag."""

    code = "container_error"

    def __init__(self, message: str, *, offset: int | None = None):
        super().__init__(message)
        self.offset = offset

    def to_dict(self) -> dict[str, Any]:
        return {"error": self.code, "message": str(self), "offset": self.offset}


class BadMagicError(ContainerError):
    code = "bad_magic"


class UnsupportedVersionError(ContainerError):
    code = "unsupported_version"


class TruncatedError(ContainerError):
    code = "truncated"


class CorruptError(ContainerError):
    code = "corrupt"


def encode(arrays: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> bytes:
    entries = dict(arrays)
    if meta is not None:
        raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        entries[META_ENTRY] = np.frombuffer(raw, dtype=np.uint8).astype("<f4")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"entry {name!r} cannot be represented")
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(buf: bytes | bytearray) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Parse a container; every array is a float32 view into ``buf`` when it is writable."""
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedError(
                f"file ends at byte {len(view)} but {pos + n} bytes are needed", offset=pos
            )
        out = view[pos : pos + n]
        pos += n
        return out

    if len(view) < len(MAGIC) or bytes(view[: len(MAGIC)]) != MAGIC:
        if len(view) < len(MAGIC) and MAGIC.startswith(bytes(view)):
            raise TruncatedError("file shorter than the magic string", offset=0)
        raise BadMagicError("missing SEMORAN1 magic", offset=0)
    pos = len(MAGIC)
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported version {version} (this reader handles {FORMAT_VERSION})", offset=8
        )
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptError(f"entry name is not UTF-8: {exc}", offset=start) from None
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(4 * n)
        if name in arrays:
            raise CorruptError(f"duplicate entry {name!r}", offset=start)
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims)
    if pos != len(view):
        raise CorruptError(f"{len(view) - pos} trailing bytes after last entry", offset=pos)

    meta: dict[str, Any] = {}
    if META_ENTRY in arrays:
        raw = arrays.pop(META_ENTRY)
        try:
            meta = json.loads(raw.astype(np.uint8).tobytes().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptError(f"metadata entry is not valid JSON: {exc}") from None
    return arrays, meta


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> None:
    atomic_write_bytes(path, encode(arrays, meta))


def read(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with open(path, "rb") as fh:
        size = os.fstat(fh.fileno()).st_size
        buf = bytearray(size)
        fh.readinto(buf)
    return decode(buf)
