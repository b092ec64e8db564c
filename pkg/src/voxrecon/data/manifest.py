"""Dataset manifests, stratified splits, and loading samples from disk.

Manifest file (UTF-8, one record per line, tab separated)::

    # voxrecon-manifest 1
    id <TAB> category <TAB> split <TAB> gt path <TAB> view paths (comma separated)

Paths are relative to the directory holding the manifest.  ``split`` is one
of train, val, test, or ``-`` when unassigned.  Lines starting with ``#``
after the first are comments.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import ConfigError, DataError
from .binvox import read_binvox, write_binvox
from .images import load_image, save_image
from .synth import Sample, synth_generate

HEADER = "# voxrecon-manifest 1"
SPLITS = ("train", "val", "test", "-")
MANIFEST_NAME = "manifest.tsv"


@dataclass(frozen=True)
class Record:
    id: str
    category: str
    gt: str
    views: tuple[str, ...]
    split: str = "-"


@dataclass(frozen=True)
class Manifest:
    root: Path
    records: tuple[Record, ...]

    def __len__(self) -> int:
        return len(self.records)

    def categories(self) -> list[str]:
        return sorted({r.category for r in self.records})

    def subset(self, split: str) -> "Manifest":
        return Manifest(self.root, tuple(r for r in self.records if r.split == split))


def write_manifest(manifest: Manifest, path: str | os.PathLike | None = None) -> Path:
    path = Path(path) if path is not None else manifest.root / MANIFEST_NAME
    lines = [HEADER]
    for r in manifest.records:
        lines.append("\t".join([r.id, r.category, r.split, r.gt, ",".join(r.views)]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path: str | os.PathLike) -> Manifest:
    """Parse a manifest file, or ``manifest.tsv`` inside a directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise DataError(f"no manifest at {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise DataError(f"{path}: missing header {HEADER!r}")
    records = []
    seen = set()
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataError(f"{path}:{no}: expected 5 tab-separated fields, got {len(parts)}")
        rid, cat, split, gt, views = parts
        if split not in SPLITS:
            raise DataError(f"{path}:{no}: unknown split {split!r}")
        if rid in seen:
            raise DataError(f"{path}:{no}: duplicate id {rid!r}")
        seen.add(rid)
        vs = tuple(v for v in views.split(",") if v)
        if not vs:
            raise DataError(f"{path}:{no}: record {rid!r} lists no views")
        records.append(Record(rid, cat, gt, vs, split))
    return Manifest(path.parent, tuple(records))


def _apportion(total: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder integer split of ``total``; ties go to the earlier slot."""
    quotas = [r * total for r in ratios]
    base = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:total - sum(base)]:
        base[i] += 1
    return base


def split_dataset(manifest: Manifest, ratios=(0.8, 0.1, 0.1), seed: int = 0
                  ) -> tuple[Manifest, Manifest, Manifest]:
    """Deterministic train/val/test partition, stratified by category.

    Split sizes follow the ratios by largest remainder; within every
    category each split receives its proportional share rounded up or down.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be 3 positive numbers summing to 1, got {ratios}")
    cats = manifest.categories()
    by_cat = {c: sorted((r for r in manifest.records if r.category == c), key=lambda r: r.id)
              for c in cats}
    targets = _apportion(len(manifest), ratios)
    alloc = {c: [int(np.floor(r * len(by_cat[c]))) for r in ratios] for c in cats}
    need = [t - sum(alloc[c][s] for c in cats) for s, t in enumerate(targets)]
    left = {c: len(by_cat[c]) - sum(alloc[c]) for c in cats}
    # hand out the leftovers, one per (category, split) at most, largest demands first
    for c in sorted(cats, key=lambda c: (-left[c], c)):
        frac = [ratios[s] * len(by_cat[c]) - alloc[c][s] for s in range(3)]
        order = sorted(range(3), key=lambda s: (-need[s], -frac[s], s))
        for s in order[:left[c]]:
            alloc[c][s] += 1
            need[s] -= 1
    if any(need):
        raise ConfigError("could not balance the stratified split")  # not reachable for valid input
    rng = np.random.default_rng(seed)
    parts: list[list[Record]] = [[], [], []]
    for c in cats:
        recs = by_cat[c]
        perm = rng.permutation(len(recs))
        pos = 0
        for s in range(3):
            for i in perm[pos:pos + alloc[c][s]]:
                parts[s].append(replace(recs[i], split=SPLITS[s]))
            pos += alloc[c][s]
    return tuple(Manifest(manifest.root, tuple(sorted(p, key=lambda r: r.id))) for p in parts)


def merge(*manifests: Manifest) -> Manifest:
    recs = tuple(r for m in manifests for r in m.records)
    return Manifest(manifests[0].root, recs)


def load_sample(manifest: Manifest, record: Record, image_side: int | None = None,
                resolution: int | None = None) -> Sample:
    root = manifest.root
    try:
        gt = read_binvox(root / record.gt, resolution)
        views = np.stack([load_image(root / v, image_side) for v in record.views])
    except FileNotFoundError as exc:
        raise DataError(f"sample {record.id!r}: missing file {exc.filename}") from exc
    if views.shape[2] != views.shape[3]:
        raise DataError(f"sample {record.id!r}: views must be square, got {views.shape[2:]}")
    return Sample(record.id, record.category, views, gt)


def load_dataset(manifest: Manifest, image_side: int | None = None,
                 resolution: int | None = None) -> list[Sample]:
    return [load_sample(manifest, r, image_side, resolution) for r in manifest.records]


def generate_dataset(out: str | os.PathLike, count: int, kinds: Sequence[str], n_views: int = 5,
                     R: int = 32, seed: int = 0, image_side: int = 32, jitter: bool = False,
                     ratios=(0.8, 0.1, 0.1)) -> Manifest:
    """Write ``count`` synthetic samples (PPM views, binvox ground truth) and a manifest.

    Kinds are assigned round robin; sample i uses seed ``seed * 1_000_003 + i``.
    Records are tagged with a stratified split.
    """
    out = Path(out)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    (out / "views").mkdir(exist_ok=True)
    records = []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        sid = f"{kind}-{i:05d}"
        s = synth_generate(kind, seed * 1_000_003 + i, n_views, image_side, R, jitter, sid)
        write_binvox(s.gt, out / "gt" / f"{sid}.binvox")
        vpaths = []
        for k, img in enumerate(s.views):
            rel = f"views/{sid}_{k}.ppm"
            save_image(img, out / rel)
            vpaths.append(rel)
        records.append(Record(sid, kind, f"gt/{sid}.binvox", tuple(vpaths)))
    manifest = Manifest(out, tuple(records))
    if count >= 3:
        manifest = merge(*split_dataset(manifest, ratios, seed))
    write_manifest(manifest)
    return manifest
