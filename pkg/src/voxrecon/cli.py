"""Command-line entry point: ``voxrecon <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 data or I/O error.

Run configuration (JSON object; unknown keys are rejected)::

    {
      "variant": "Toy",          # F, A or Toy
      "resolution": 32,          # Toy only: 16 or 32
      "refiner": false,          # Toy only
      "image_side": 32,          # Toy only
      "data": "data/",           # directory with manifest.tsv (relative to the config file)
      "out": "runs/toy",         # checkpoints, log and evaluation output
      "seed": 0,                 # weight initialization and training streams
      "train": {...}             # TrainConfig fields; omitted ones take their defaults
    }
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .archive import save_archive
from .data import KINDS, generate_dataset, load_dataset, load_image, read_manifest, write_binvox
from .errors import (ArchiveError, BinvoxError, ConfigError, ContractError, DataError, ImageFormatError,
                     ShapeError)
from .gradcheck import model_gradcheck
from .model import VARIANTS, build_config, init_model, model_forward
from .objective import THRESHOLD, binarize
from .tensor import no_grad
from .training import TrainConfig, evaluate, load_checkpoint, load_model, run_training

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3


@dataclass(frozen=True)
class RunConfig:
    variant: str = "Toy"
    resolution: int = 32
    refiner: bool = False
    image_side: int = 32
    data: str = "data"
    out: str = "run"
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        d = dict(d)
        seed = d.get("seed", 0)
        train = dict(d.pop("train", {}))
        train.setdefault("seed", seed)
        cfg = cls(**d, train=TrainConfig.from_dict(train))
        if cfg.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {cfg.variant!r}")
        if base is not None:
            cfg = replace(cfg, data=str(base / cfg.data), out=str(base / cfg.out))
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise DataError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw, path.parent)

    def network(self):
        if self.variant == "Toy":
            return build_config("Toy", self.resolution, self.refiner, self.image_side)
        return build_config(self.variant)


def _log_to(path: Path):
    def log(line: str) -> None:
        print(line, flush=True)
        with path.open("a") as fh:
            fh.write(line + "\n")
    return log


def cmd_gen_data(args) -> int:
    kinds = [k for k in args.kinds.split(",") if k]
    bad = [k for k in kinds if k not in KINDS]
    if bad or not kinds:
        raise ConfigError(f"unknown kinds {bad}; choose from {','.join(KINDS)}")
    if args.count < 1 or args.views < 1:
        raise ConfigError("--count and --views must be >= 1")
    m = generate_dataset(args.out, args.count, kinds, args.views, args.res, args.seed, args.side, args.jitter)
    print(f"wrote {len(m)} samples ({args.views} views each, {args.res}^3 voxels) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = RunConfig.load(args.config)
    cfg = run.network()
    manifest = read_manifest(run.data)
    train = load_dataset(manifest.subset("train") if manifest.subset("train").records else manifest,
                         cfg.image_side, cfg.resolution)
    val_m = manifest.subset("val")
    val = load_dataset(val_m, cfg.image_side, cfg.resolution) if val_m.records else None
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = None
    if args.resume:
        resume, _ = load_checkpoint(args.resume, run.train, cfg)
    params = init_model(cfg, run.seed)
    run_training(cfg, params, train, run.train, val, out, resume, _log_to(out / "train.log"))
    print(f"final checkpoint: {out / 'final.ntar'}")
    return EXIT_OK


def _parse_views(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise ConfigError(f"--views expects comma-separated integers, got {text!r}") from exc
    if not vals or min(vals) < 1:
        raise ConfigError("--views needs positive integers")
    return vals


def cmd_eval(args) -> int:
    views = _parse_views(args.views)
    cfg, params = load_model(args.ckpt)
    manifest = read_manifest(args.data)
    if args.split != "all":
        manifest = manifest.subset(args.split)
    if not manifest.records:
        raise DataError(f"no samples in split {args.split!r} of {args.data}")
    samples = load_dataset(manifest, cfg.image_side, cfg.resolution)
    table = evaluate(cfg, params, samples, views, args.threshold, args.fusion)
    print(table.format())
    doc = json.loads(table.to_json())
    doc["threshold"] = args.threshold
    if args.sweep:
        # overall IoU per threshold; reported alongside, never used to pick the main table
        sweep = {}
        for t in _parse_thresholds(args.sweep):
            row = evaluate(cfg, params, samples, views, t, args.fusion).rows["overall"]
            sweep[f"{t:g}"] = row
            print(f"t={t:<6g}" + "".join(f"{v:10.4f}" for v in row))
        doc["sweep"] = sweep
    out = Path(args.out) if args.out else Path(args.ckpt).with_suffix(".eval.json")
    out.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return EXIT_OK


def _parse_thresholds(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise ConfigError(f"--sweep expects comma-separated numbers, got {text!r}") from exc
    if not vals or not all(0 < v < 1 for v in vals):
        raise ConfigError("--sweep thresholds must lie in (0, 1)")
    return vals


def _load_images(paths: str, side: int) -> np.ndarray:
    files = [p for p in paths.split(",") if p]
    if not files:
        raise ConfigError("--images needs at least one file")
    try:
        return np.stack([load_image(f, side) for f in files])[None]
    except FileNotFoundError as exc:
        raise DataError(f"cannot read image {exc.filename}") from exc


def cmd_reconstruct(args) -> int:
    cfg, params = load_model(args.ckpt)
    images = _load_images(args.images, cfg.image_side)
    with no_grad():
        rec = model_forward(cfg, params, images, "eval", args.fusion, canonical=True)
    write_binvox(binarize(rec.output.data[0, 0], args.threshold), args.out)
    print(f"wrote {args.out} ({images.shape[1]} view(s), fusion={args.fusion})")
    return EXIT_OK


def cmd_inspect_scores(args) -> int:
    cfg, params = load_model(args.ckpt)
    images = _load_images(args.images, cfg.image_side)
    n = images.shape[1]
    if n < 2:
        print("warning: a single view gets a normalized score of 1 everywhere", file=sys.stderr)
    with no_grad():
        rec = model_forward(cfg, params, images, "eval", "context", canonical=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["view\tmean_raw\tmean_normalized"]
    for r in range(n):
        norm = rec.scores[r].data[0, 0] if rec.scores else np.ones((cfg.resolution,) * 3, np.float32)
        raw = rec.raw_scores[r].data[0, 0] if rec.raw_scores else np.zeros_like(norm)
        save_archive(out / f"scores_view{r}.ntar", {"raw": raw, "normalized": norm}, {"view": r, "views": n})
        lines.append(f"{r}\t{raw.mean():.6f}\t{norm.mean():.6f}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_param_count(args) -> int:
    cfg = build_config(args.variant)
    print(f"{args.variant}: {cfg.param_count():,} parameters")
    if args.verbose:
        print(json.dumps(cfg.describe(), indent=2))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.precision != "f64":
        raise ConfigError("gradcheck runs in f64 only")
    if args.variant != "Toy":
        raise ConfigError("gradcheck is only practical for the Toy variant")
    rep = model_gradcheck("Toy", args.res, True, coords=args.coords, seed=args.seed)
    print(f"max relative error {rep.max_rel_error:.3e} over {rep.probed} coordinates "
          f"({rep.redrawn} redrawn next to activation kinks)")
    return EXIT_OK if rep.max_rel_error < args.tol else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="voxrecon", description="Multi-view voxel reconstruction.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--kinds", default=",".join(KINDS))
    p.add_argument("--views", type=int, default=5)
    p.add_argument("--res", type=int, default=32, choices=(16, 32))
    p.add_argument("--side", type=int, default=32, help="image side in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jitter", action="store_true", help="per-view brightness/contrast jitter")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="two-stage training from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="IoU table by category and view count")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--views", default="1")
    p.add_argument("--threshold", type=float, default=THRESHOLD)
    p.add_argument("--fusion", choices=("context", "average"), default="context")
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    p.add_argument("--sweep", help="also report overall IoU at these comma-separated thresholds")
    p.add_argument("--out", help="JSON output (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", help="images to a binvox volume")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True, help="comma-separated PPM files")
    p.add_argument("--out", required=True)
    p.add_argument("--fusion", choices=("context", "average"), default="context")
    p.add_argument("--threshold", type=float, default=THRESHOLD)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("inspect-scores", help="dump per-view fusion score maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect_scores)

    p = sub.add_parser("param-count", help="print the number of learnable parameters")
    p.add_argument("--variant", choices=VARIANTS, required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("gradcheck", help="finite-difference check of the whole Toy network")
    p.add_argument("--variant", choices=VARIANTS, default="Toy")
    p.add_argument("--precision", default="f64")
    p.add_argument("--res", type=int, default=16, choices=(16, 32))
    p.add_argument("--coords", type=int, default=2, help="coordinates probed per parameter tensor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ArchiveError, BinvoxError, ImageFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
