"""Procedural shapes and orthographic renders for desk-scale training.

Shapes live in the cube [-1, 1]^3 sampled at R^3 cell centers, y pointing up,
and are stored as boolean grids indexed [x, y, z].  Each view casts parallel
rays from a seeded direction (any azimuth, elevation 15 to 45 degrees above
the horizon) and marks a pixel as object exactly when a sample point along
its ray falls inside an occupied cell, so every object pixel is backed by at
least one occupied voxel on its ray.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError

KINDS = ("box", "table", "lshape", "cross", "sphere")
ELEVATION = (np.deg2rad(15.0), np.deg2rad(45.0))
EXTENT = 1.4          # half-width of the image window, in cube half-widths
BACKGROUND = 1.0


@dataclass(frozen=True)
class Sample:
    id: str
    category: str
    views: np.ndarray             # (n, 3, H, W) float32 in [0, 1]
    gt: np.ndarray                # (R, R, R) bool, indexed [x, y, z]
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n_views(self) -> int:
        return self.views.shape[0]


def cell_centers(R: int) -> np.ndarray:
    return (np.arange(R) + 0.5) / R * 2.0 - 1.0


def _slab(c, lo, hi):
    return (c > lo) & (c < hi)


def make_shape(kind: str, rng: np.random.Generator, R: int) -> np.ndarray:
    c = cell_centers(R)
    x, y, z = c[:, None, None], c[None, :, None], c[None, None, :]
    u = rng.uniform
    if kind == "box":
        ax, ay, az = u(0.3, 0.8, size=3)
        g = _slab(x, -ax, ax) & _slab(y, -ay, ay) & _slab(z, -az, az)
    elif kind == "table":
        ax, az = u(0.5, 0.85, size=2)
        top = u(0.2, 0.6)
        thick = u(0.12, 0.25)
        leg = u(0.12, 0.22)
        bottom = -u(0.6, 0.85)
        g = _slab(x, -ax, ax) & _slab(y, top - thick, top) & _slab(z, -az, az)
        for sx in (-1, 1):
            for sz in (-1, 1):
                lx = _slab(x, ax - leg, ax) if sx > 0 else _slab(x, -ax, -ax + leg)
                lz = _slab(z, az - leg, az) if sz > 0 else _slab(z, -az, -az + leg)
                g = g | (lx & lz & _slab(y, bottom, top))
    elif kind == "lshape":
        a, b, d = u(0.5, 0.85), u(0.5, 0.85), u(0.3, 0.7)
        w = u(0.25, 0.45)
        zs = _slab(z, -d, d)
        g = (_slab(x, -a, -a + 2 * w) & _slab(y, -b, b) & zs) | \
            (_slab(x, -a, a) & _slab(y, -b, -b + 2 * w) & zs)
    elif kind == "cross":
        w = u(0.15, 0.3)
        lx, ly, lz = u(0.6, 0.9, size=3)
        g = (_slab(x, -lx, lx) & _slab(y, -w, w) & _slab(z, -w, w)) | \
            (_slab(x, -w, w) & _slab(y, -ly, ly) & _slab(z, -w, w)) | \
            (_slab(x, -w, w) & _slab(y, -w, w) & _slab(z, -lz, lz))
    elif kind == "sphere":
        r = u(0.45, 0.85)
        g = x ** 2 + y ** 2 + z ** 2 < r * r
    else:
        raise ConfigError(f"unknown shape kind {kind!r}; choose from {KINDS}")
    return np.ascontiguousarray(np.broadcast_to(g, (R, R, R)))


def view_direction(azimuth: float, elevation: float) -> np.ndarray:
    """Unit ray direction (camera toward object) for a camera above the horizon."""
    ce = np.cos(elevation)
    return -np.array([ce * np.cos(azimuth), np.sin(elevation), ce * np.sin(azimuth)])


def image_basis(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Right and up vectors spanning the image plane of direction ``d``."""
    ref = np.array([0.0, 1.0, 0.0]) if abs(d[1]) < 0.99 else np.array([0.0, 0.0, 1.0])
    right = np.cross(ref, d)
    right /= np.linalg.norm(right)
    up = np.cross(d, right)
    if up @ ref < 0:
        up = -up
    return right, up


def render_view(grid: np.ndarray, d: np.ndarray, side: int, extent: float = EXTENT,
                step: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Orthographic ray cast.  Returns (mask, depth), each (side, side).

    Row 0 is the top of the image.  ``depth`` is the ray parameter of the
    first hit (np.inf for background).
    """
    R = grid.shape[0]
    d = np.asarray(d, dtype=np.float64)
    d = d / np.linalg.norm(d)
    right, up = image_basis(d)
    step = step or 0.5 / R
    reach = np.sqrt(3.0)
    ts = np.arange(-reach, reach + step, step)
    p = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    p = p * extent
    uu, vv = np.meshgrid(p, -p)                       # rows run top to bottom
    origin = uu[..., None] * right + vv[..., None] * up
    pts = origin[:, :, None, :] + ts[None, None, :, None] * d
    idx = np.floor((pts + 1.0) / 2.0 * R).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < R) & (np.abs(pts) < 1.0), axis=-1)
    idx = np.where(inside[..., None], idx, 0)
    hit = inside & grid[idx[..., 0], idx[..., 1], idx[..., 2]]
    mask = hit.any(axis=-1)
    first = np.argmax(hit, axis=-1)
    depth = np.where(mask, ts[first], np.inf)
    return mask, depth


def shade(mask: np.ndarray, depth: np.ndarray, jitter: np.random.Generator | None = None) -> np.ndarray:
    """Gray image (3, H, W): near surfaces darker, background white.

    With ``jitter``, brightness and contrast are perturbed per view.
    """
    reach = np.sqrt(3.0)
    near = np.clip((np.where(mask, depth, reach) + reach) / (2 * reach), 0.0, 1.0)
    img = np.where(mask, 0.1 + 0.6 * near, BACKGROUND)
    if jitter is not None:
        contrast = jitter.uniform(0.8, 1.2)
        brightness = jitter.uniform(-0.1, 0.1)
        img = np.clip((img - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0)
    return np.repeat(img[None], 3, axis=0).astype(np.float32)


def synth_generate(kind: str, seed: int, n_views: int = 5, image_side: int = 32, R: int = 32,
                   jitter: bool = False, sample_id: str | None = None) -> Sample:
    """One random shape of ``kind`` with ``n_views`` renders, deterministic in ``seed``."""
    if kind not in KINDS:
        raise ConfigError(f"unknown shape kind {kind!r}; choose from {KINDS}")
    if R not in (16, 32):
        raise ConfigError(f"resolution must be 16 or 32, got {R}")
    if n_views < 1:
        raise ConfigError("n_views must be >= 1")
    rng = np.random.default_rng([seed, zlib.crc32(kind.encode())])
    gt = make_shape(kind, rng, R)
    views = []
    for _ in range(n_views):
        d = view_direction(rng.uniform(0, 2 * np.pi), rng.uniform(*ELEVATION))
        mask, depth = render_view(gt, d, image_side)
        views.append(shade(mask, depth, rng if jitter else None))
    return Sample(sample_id or f"{kind}-{seed}", kind, np.stack(views), gt)
