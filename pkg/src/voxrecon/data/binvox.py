"""binvox voxel files: ASCII header, then byte-pair run-length encoded occupancy.

The stream visits voxels with y fastest, then z, then x, so the flat index
of cell (x, y, z) is ``x * D**2 + z * D + y``.  Grids in memory are indexed
``grid[x, y, z]``.

Header numbers are kept as the exact tokens read from the file, which makes
``write(read(f))`` reproduce ``f`` whenever its runs are maximal (every run
as long as possible up to 255), the form this writer emits.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import BadMagicError, BinvoxError, ContractError, DimensionError, TruncatedStreamError

MAGIC = b"#binvox 1"
MAX_RUN = 255


@dataclass(frozen=True)
class BinvoxHeader:
    dims: tuple[int, int, int]
    translate: tuple[str, str, str] = ("0", "0", "0")
    scale: str = "1"


def encode_runs(grid: np.ndarray) -> bytes:
    """RLE payload for a boolean grid indexed [x, y, z]."""
    flat = np.ascontiguousarray(np.asarray(grid, dtype=np.uint8).transpose(0, 2, 1)).reshape(-1)
    if flat.size == 0:
        return b""
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [flat.size]]))
    out = bytearray()
    for v, n in zip(flat[starts], lengths):
        full, rest = divmod(int(n), MAX_RUN)
        out += bytes((int(v), MAX_RUN)) * full
        if rest:
            out += bytes((int(v), rest))
    return bytes(out)


def decode_runs(payload: bytes, dims: tuple[int, int, int]) -> np.ndarray:
    total = dims[0] * dims[1] * dims[2]
    if len(payload) % 2:
        raise TruncatedStreamError("run-length stream ends inside a (value, count) pair")
    pairs = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 2)
    values, counts = pairs[:, 0], pairs[:, 1].astype(np.int64)
    if np.any(values > 1):
        raise BinvoxError("run value outside {0, 1}")
    if np.any(counts == 0):
        raise BinvoxError("zero-length run")
    covered = int(counts.sum())
    if covered < total:
        raise TruncatedStreamError(f"runs cover {covered} of {total} voxels")
    if covered > total:
        raise BinvoxError(f"runs cover {covered} voxels, grid has {total}")
    flat = np.repeat(values.astype(bool), counts)
    return np.ascontiguousarray(flat.reshape(dims[0], dims[2], dims[1]).transpose(0, 2, 1))


def _read_line(blob: bytes, pos: int) -> tuple[bytes, int]:
    end = blob.find(b"\n", pos)
    if end < 0:
        raise TruncatedStreamError("header ends before the 'data' line")
    return blob[pos:end].rstrip(b"\r"), end + 1


def parse_binvox(blob: bytes, expect: int | tuple[int, int, int] | None = None
                 ) -> tuple[np.ndarray, BinvoxHeader]:
    line, pos = _read_line(blob, 0)
    if line.strip() != MAGIC:
        raise BadMagicError(f"expected {MAGIC!r}, got {line[:20]!r}")
    dims = None
    translate, scale = ("0", "0", "0"), "1"
    while True:
        line, pos = _read_line(blob, pos)
        tok = line.decode("ascii", errors="replace").split()
        if not tok:
            continue
        if tok[0] == "data":
            break
        if tok[0] == "dim":
            try:
                dims = tuple(int(t) for t in tok[1:])
            except ValueError as exc:
                raise DimensionError(f"bad dim line {line!r}") from exc
            if len(dims) != 3 or min(dims) < 1:
                raise DimensionError(f"bad dim line {line!r}")
        elif tok[0] == "translate" and len(tok) == 4:
            translate = tuple(tok[1:])
        elif tok[0] == "scale" and len(tok) == 2:
            scale = tok[1]
        else:
            raise BinvoxError(f"unrecognized header line {line!r}")
    if dims is None:
        raise DimensionError("header has no dim line")
    if expect is not None:
        want = (expect,) * 3 if isinstance(expect, int) else tuple(expect)
        if dims != want:
            raise DimensionError(f"grid is {dims}, expected {want}")
    grid = decode_runs(blob[pos:], dims)
    return grid, BinvoxHeader(dims, translate, scale)


def format_binvox(grid: np.ndarray, header: BinvoxHeader | None = None) -> bytes:
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise DimensionError(f"voxel grid must be 3-D, got shape {grid.shape}")
    if not np.all((grid == 0) | (grid == 1)):
        raise ContractError("voxel grid must be binary")
    if header is None:
        header = BinvoxHeader(tuple(grid.shape))
    elif tuple(header.dims) != grid.shape:
        raise DimensionError(f"header dims {header.dims} differ from grid {grid.shape}")
    d = header.dims
    head = (f"#binvox 1\ndim {d[0]} {d[1]} {d[2]}\n"
            f"translate {' '.join(header.translate)}\nscale {header.scale}\ndata\n")
    return head.encode("ascii") + encode_runs(grid)


def read_binvox(path: str | os.PathLike, expect=None) -> np.ndarray:
    """Boolean grid indexed [x, y, z]; ``expect`` checks the dimensions."""
    return parse_binvox(Path(path).read_bytes(), expect)[0]


def read_binvox_with_header(path: str | os.PathLike, expect=None) -> tuple[np.ndarray, BinvoxHeader]:
    return parse_binvox(Path(path).read_bytes(), expect)


def write_binvox(grid: np.ndarray, path: str | os.PathLike, header: BinvoxHeader | None = None) -> None:
    Path(path).write_bytes(format_binvox(grid, header))
