"""Named-tensor archive: one file holding named arrays plus optional metadata.

Layout (all integers little-endian)::

    magic      4 bytes  b"NTAR"
    version    u32
    index_len  u64      byte length of the index text
    meta_len   u64      byte length of the metadata JSON (0 when absent)
    index      UTF-8 lines "name<TAB>dtype<TAB>shape", shape as "2x3x4" ("" for scalars)
    meta       UTF-8 JSON object
    padding    zeros up to the next multiple of 8
    buffers    raw little-endian IEEE-754 data in index order, each padded to 8 bytes
    checksum   u32      CRC-32 over the buffer region (padding included)
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CorruptArchiveError, VersionError

MAGIC = b"NTAR"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8"), "u8": np.dtype("u1")}


def _pad8(n: int) -> int:
    return (-n) % 8


def _tag(arr: np.ndarray) -> str:
    for tag, ref in _DTYPES.items():
        if arr.dtype.kind == ref.kind and arr.dtype.itemsize == ref.itemsize:
            return tag
    raise TypeError(f"unsupported dtype {arr.dtype}")


def encode_archive(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    lines = []
    blobs = []
    for name, arr in tensors.items():
        if "\t" in name or "\n" in name or not name:
            raise ValueError(f"invalid entry name {name!r}")
        arr = np.asarray(arr)
        tag = _tag(arr)
        lines.append(f"{name}\t{tag}\t{'x'.join(str(s) for s in arr.shape)}\n")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        blobs.append(raw + b"\0" * _pad8(len(raw)))
    index = "".join(lines).encode()
    meta_bytes = json.dumps(dict(meta), sort_keys=True).encode() if meta else b""
    head = _HEADER.pack(MAGIC, VERSION, len(index), len(meta_bytes)) + index + meta_bytes
    head += b"\0" * _pad8(len(head))
    body = b"".join(blobs)
    return head + body + struct.pack("<I", zlib.crc32(body))


def decode_archive(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < _HEADER.size + 4:
        raise CorruptArchiveError("archive too short")
    magic, version, index_len, meta_len = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptArchiveError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"archive format version {version}, expected {VERSION}")
    pos = _HEADER.size
    try:
        index = blob[pos:pos + index_len].decode()
        pos += index_len
        meta = json.loads(blob[pos:pos + meta_len].decode()) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptArchiveError(f"unreadable index or metadata: {exc}") from exc
    pos += meta_len
    pos += _pad8(pos)
    body_start = pos
    body_end = len(blob) - 4
    if body_end < body_start:
        raise CorruptArchiveError("archive truncated")
    (crc,) = struct.unpack_from("<I", blob, body_end)
    if zlib.crc32(blob[body_start:body_end]) != crc:
        raise CorruptArchiveError("checksum mismatch")
    out: dict[str, np.ndarray] = {}
    for line in index.splitlines():
        try:
            name, tag, shape_s = line.split("\t")
            dt = _DTYPES[tag]
            shape = tuple(int(s) for s in shape_s.split("x")) if shape_s else ()
        except (ValueError, KeyError) as exc:
            raise CorruptArchiveError(f"bad index line {line!r}") from exc
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > body_end:
            raise CorruptArchiveError(f"entry {name!r} runs past the end of the archive")
        out[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes + _pad8(nbytes)
    if pos != body_end:
        raise CorruptArchiveError("trailing bytes after last entry")
    return out, meta


def save_archive(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    Path(path).write_bytes(encode_archive(tensors, meta))


def load_archive(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    return decode_archive(Path(path).read_bytes())
