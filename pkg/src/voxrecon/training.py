"""Adam, learning-rate schedule, two-stage training, checkpoints and evaluation.

Training log format: one line per epoch, tab separated, fields always in
this order::

    stage=<1|2>  epoch=<int>  lr=<float>  loss=<float>  val_iou=<float|nan>  seconds=<float>

``epoch`` counts from 1 within a stage.  ``val_iou`` is the mean validation
IoU at 1 view in stage 1 and at ``min(3, n_max)`` views in stage 2 (``nan``
without a validation set).
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .archive import load_archive, save_archive
from .errors import ConfigError, ContractError, DataError, VersionError
from .layers import ParamStore, params_from_arrays
from .model import NetworkConfig, build_config, model_forward
from .objective import THRESHOLD, bce_loss, iou
from .tensor import Tensor, add, no_grad, scalar_mul

PRECISIONS = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    ``stage1_epochs``, ``stage2_epochs`` and ``decay_epoch`` are given at
    full scale and multiplied by ``epoch_scale`` (rounded, at least 1 for
    the stages).  ``ed_weight`` is the weight of the loss on the fused
    volume when a refiner is present.
    """

    batch_size: int = 64
    lr: float = 1e-3
    decay_epoch: int = 150
    decay_factor: float = 2.0
    stage1_epochs: int = 250
    stage2_epochs: int = 100
    epoch_scale: float = 1.0
    n_max: int = 5
    seed: int = 0
    precision: str = "f32"
    ed_weight: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("batch_size", "stage1_epochs", "stage2_epochs", "n_max", "decay_epoch"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {getattr(self, name)!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not self.decay_factor > 0:
            raise ConfigError(f"decay_factor must be positive, got {self.decay_factor}")
        if not self.epoch_scale > 0:
            raise ConfigError(f"epoch_scale must be positive, got {self.epoch_scale}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        if self.ed_weight < 0:
            raise ConfigError("ed_weight must be >= 0")

    def epochs(self, stage: int) -> int:
        full = self.stage1_epochs if stage == 1 else self.stage2_epochs
        return max(1, int(round(full * self.epoch_scale)))

    @property
    def decay_at(self) -> int:
        return max(1, int(round(self.decay_epoch * self.epoch_scale)))

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training keys {unknown}")
        return cls(**d)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Rate for a 0-based epoch within a stage: base, divided by the factor from ``decay_at`` on."""
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    return config.lr / config.decay_factor if epoch >= config.decay_at else config.lr


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3

    @classmethod
    def for_config(cls, config: TrainConfig) -> "AdamState":
        return cls(beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps, lr=config.lr)


def adam_step(state: AdamState, params: Sequence[tuple[str, Tensor]], lr: float | None = None) -> None:
    """One bias-corrected Adam update of ``params`` in place."""
    missing = [name for name, t in params if t.grad is None]
    if missing:
        raise ContractError(f"no gradient for parameter {missing[0]!r}"
                            + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params:
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------- batches and losses

STAGE_PREFIXES = {1: ("enc.", "dec.", "ref."), 2: None}


def _gt_tensor(samples, dtype) -> np.ndarray:
    return np.stack([s.gt for s in samples])[:, None].astype(dtype)


def _pick_views(samples, n: int, rng: np.random.Generator | None) -> np.ndarray:
    """(B, n, 3, H, W); random views without replacement, or the first n without an rng."""
    out = []
    for s in samples:
        if n > s.n_views:
            raise DataError(f"sample {s.id!r} has {s.n_views} views, {n} requested")
        idx = np.arange(n) if rng is None else rng.choice(s.n_views, size=n, replace=False)
        out.append(s.views[idx])
    return np.stack(out)


def reconstruction_loss(cfg: NetworkConfig, rec, gt: np.ndarray, ed_weight: float) -> Tensor:
    """BCE on the final output; with a refiner, plus ``ed_weight`` times BCE on the fused volume."""
    loss = bce_loss(rec.output, gt)
    if rec.refined is not None and ed_weight > 0:
        loss = add(loss, scalar_mul(bce_loss(rec.fused, gt), ed_weight))
    return loss


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalTable:
    """Mean IoU by category (rows, plus "overall") and view count (columns)."""

    view_counts: list[int]
    rows: dict[str, list[float]]
    counts: dict[str, int]

    def format(self) -> str:
        head = ["category".ljust(12)] + [f"{k} view{'s' if k > 1 else ''}".rjust(9) for k in self.view_counts]
        lines = [" ".join(head)]
        for name, vals in self.rows.items():
            lines.append(" ".join([name.ljust(12)] + [f"{v:9.4f}" for v in vals]))
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({"view_counts": self.view_counts, "rows": self.rows, "counts": self.counts},
                          sort_keys=True, indent=1)

    def value(self, category: str, views: int) -> float:
        return self.rows[category][self.view_counts.index(views)]


Predictor = Callable[[list, np.ndarray], np.ndarray]


def model_predictor(cfg: NetworkConfig, params: ParamStore, fusion: str = "context",
                    canonical: bool = False) -> Predictor:
    """Eval-mode prediction (B, R, R, R) for a list of samples and their (B, n, 3, H, W) views."""
    dtype = params[f"{cfg.encoder[0].name}.weight"].dtype

    def predict(samples, views):
        with no_grad():
            rec = model_forward(cfg, params, views.astype(dtype), "eval", fusion, canonical)
        return rec.output.data[:, 0]

    return predict


def evaluate(cfg: NetworkConfig | None, params: ParamStore | None, samples: Sequence, view_counts: Sequence[int],
             t: float = THRESHOLD, fusion: str = "context", canonical: bool = False,
             batch_size: int = 16, predictor: Predictor | None = None) -> EvalTable:
    """IoU table over ``samples`` using the first k views of each sample for each k.

    Samples are processed in id order and the overall row averages over
    samples, so the result does not depend on the input order.
    """
    if not samples:
        raise DataError("cannot evaluate an empty dataset")
    view_counts = [int(k) for k in view_counts]
    for k in view_counts:
        short = [s.id for s in samples if s.n_views < k]
        if k < 1 or short:
            raise DataError(f"{k} views requested but sample {short[0] if short else ''!r} has fewer")
    predict = predictor or model_predictor(cfg, params, fusion, canonical)
    ordered = sorted(samples, key=lambda s: s.id)
    cats = sorted({s.category for s in ordered})
    per: dict[int, list[float]] = {}
    for k in view_counts:
        scores = []
        for i in range(0, len(ordered), batch_size):
            chunk = ordered[i:i + batch_size]
            pred = predict(chunk, _pick_views(chunk, k, None))
            scores += [iou(p, s.gt, t) for p, s in zip(pred, chunk)]
        per[k] = scores
    rows = {}
    for c in cats:
        sel = [j for j, s in enumerate(ordered) if s.category == c]
        rows[c] = [float(np.mean([per[k][j] for j in sel])) for k in view_counts]
    rows["overall"] = [float(np.mean(per[k])) for k in view_counts]
    counts = {c: sum(s.category == c for s in ordered) for c in cats}
    counts["overall"] = len(ordered)
    return EvalTable(view_counts, rows, counts)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = 1


def config_hash(cfg: NetworkConfig, config: TrainConfig) -> str:
    key = {"model": model_key(cfg), "train": asdict(config), "format": CHECKPOINT_FORMAT}
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


def model_key(cfg: NetworkConfig) -> dict:
    return {"variant": cfg.variant, "resolution": cfg.resolution,
            "refiner": cfg.refiner is not None, "image_side": cfg.image_side}


def config_from_key(key: Mapping) -> NetworkConfig:
    image_side = key["image_side"] if key["variant"] == "Toy" else None
    return build_config(key["variant"], key["resolution"], key["refiner"], image_side)


@dataclass
class Checkpoint:
    params: ParamStore
    adam: AdamState
    config: TrainConfig
    model: dict
    stage: int
    epoch: int            # epochs completed within ``stage``
    rng_state: dict


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint, cfg: NetworkConfig) -> None:
    tensors = {f"param/{k}": v for k, v in ckpt.params.arrays().items()}
    tensors.update({f"adam.m/{k}": v for k, v in ckpt.adam.m.items()})
    tensors.update({f"adam.v/{k}": v for k, v in ckpt.adam.v.items()})
    meta = {
        "kind": "checkpoint",
        "format": CHECKPOINT_FORMAT,
        "config_hash": config_hash(cfg, ckpt.config),
        "config": asdict(ckpt.config),
        "model": model_key(cfg),
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "adam": {"step": ckpt.adam.step, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2,
                 "eps": ckpt.adam.eps, "lr": ckpt.adam.lr},
        "rng_state": ckpt.rng_state,
    }
    tmp = Path(str(path) + ".tmp")
    save_archive(tmp, tensors, meta)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, config: TrainConfig | None = None,
                    cfg: NetworkConfig | None = None) -> tuple[Checkpoint, NetworkConfig]:
    """Read a checkpoint; with ``config`` given, refuse one written under a different config."""
    arrays, meta = load_archive(path)
    if meta.get("kind") != "checkpoint" or meta.get("format") != CHECKPOINT_FORMAT:
        raise VersionError(f"{path}: not a format-{CHECKPOINT_FORMAT} checkpoint")
    stored = TrainConfig.from_dict(meta["config"])
    net = cfg or config_from_key(meta["model"])
    if model_key(net) != meta["model"]:
        raise VersionError(f"{path}: checkpoint model {meta['model']} differs from {model_key(net)}")
    if config is not None and config_hash(net, config) != meta["config_hash"]:
        raise VersionError(f"{path}: checkpoint was written under a different training config "
                           f"(hash {meta['config_hash']}, current {config_hash(net, config)})")
    params = params_from_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("param/")},
                                net.all_specs())
    a = meta["adam"]
    adam = AdamState({k[7:]: v for k, v in arrays.items() if k.startswith("adam.m/")},
                     {k[7:]: v for k, v in arrays.items() if k.startswith("adam.v/")},
                     a["step"], a["beta1"], a["beta2"], a["eps"], a["lr"])
    return Checkpoint(params, adam, stored, meta["model"], meta["stage"], meta["epoch"],
                      meta["rng_state"]), net


def load_model(path: str | os.PathLike) -> tuple[NetworkConfig, ParamStore]:
    ckpt, net = load_checkpoint(path)
    return net, ckpt.params


# ---------------------------------------------------------------- training loop

def _format_log(stage, epoch, lr, loss, val, seconds) -> str:
    return f"stage={stage}\tepoch={epoch}\tlr={lr:.6g}\tloss={loss:.6f}\tval_iou={val:.4f}\tseconds={seconds:.2f}"


def parse_log_line(line: str) -> dict:
    out = {}
    for part in line.rstrip("\n").split("\t"):
        k, v = part.split("=", 1)
        out[k] = int(v) if k in ("stage", "epoch") else float(v)
    return out


def epoch_rng(config: TrainConfig, stage: int, epoch: int) -> np.random.Generator:
    """Stream for one epoch's shuffling, view choice and view counts."""
    return np.random.default_rng([config.seed, stage, epoch])


def train_epoch(cfg: NetworkConfig, params: ParamStore, adam: AdamState, samples: Sequence,
                config: TrainConfig, stage: int, epoch: int) -> float:
    """One pass over ``samples``; returns the mean batch loss."""
    rng = epoch_rng(config, stage, epoch)
    order = rng.permutation(len(samples))
    trainable = params.trainable(STAGE_PREFIXES[stage])
    lr = lr_at(config, epoch)
    dtype = config.dtype
    losses = []
    for i in range(0, len(order), config.batch_size):
        batch = [samples[j] for j in order[i:i + config.batch_size]]
        n = 1 if stage == 1 else int(rng.integers(1, config.n_max + 1))
        views = _pick_views(batch, n, rng).astype(dtype)
        params.zero_grad()
        rec = model_forward(cfg, params, views, "train", "context")
        loss = reconstruction_loss(cfg, rec, _gt_tensor(batch, dtype), config.ed_weight)
        loss.backward()
        if stage == 2 and n == 1:
            # the scoring network is not evaluated for a single view
            step_params = [(k, t) for k, t in trainable if t.grad is not None]
        else:
            step_params = trainable
        adam_step(adam, step_params, lr)
        losses.append(float(loss.data))
    return float(np.mean(losses))


def run_training(cfg: NetworkConfig, params: ParamStore, train: Sequence, config: TrainConfig,
                 val: Sequence | None = None, ckpt_dir: str | os.PathLike | None = None,
                 resume: Checkpoint | None = None, log: Callable[[str], None] | None = None,
                 stop_after: tuple[int, int] | None = None) -> ParamStore:
    """Stage 1 then stage 2, with a checkpoint after every epoch when ``ckpt_dir`` is set.

    ``resume`` continues a run from its checkpoint; ``stop_after=(stage,
    epoch)`` halts once that epoch is done (used to simulate interruption).
    Each stage starts a fresh Adam state.
    """
    if not train:
        raise ConfigError("training set is empty")
    if config.n_max > min(s.n_views for s in train):
        raise DataError(f"n_max={config.n_max} exceeds the views available per training sample")
    params = params.astype(config.dtype) if resume is None else resume.params
    start_stage, start_epoch = (1, 0) if resume is None else (resume.stage, resume.epoch)
    if ckpt_dir is not None:
        Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
    for stage in (1, 2):
        if stage < start_stage:
            continue
        epochs = config.epochs(stage)
        if resume is not None and stage == start_stage:
            adam, first = resume.adam, start_epoch
        else:
            adam, first = AdamState.for_config(config), 0
        for epoch in range(first, epochs):
            t0 = time.perf_counter()
            loss = train_epoch(cfg, params, adam, train, config, stage, epoch)
            val_iou = math.nan
            if val:
                k = 1 if stage == 1 else min(3, config.n_max)
                val_iou = evaluate(cfg, params, val, [k]).rows["overall"][0]
            if log is not None:
                log(_format_log(stage, epoch + 1, lr_at(config, epoch), loss, val_iou,
                                time.perf_counter() - t0))
            if ckpt_dir is not None:
                ckpt = Checkpoint(params, adam, config, model_key(cfg), stage, epoch + 1,
                                  {"seed": config.seed, "stage": stage, "next_epoch": epoch + 1})
                save_checkpoint(Path(ckpt_dir) / "last.ntar", ckpt, cfg)
            if stop_after == (stage, epoch + 1):
                return params
    if ckpt_dir is not None:
        final = Checkpoint(params, AdamState.for_config(config), config, model_key(cfg), 2,
                           config.epochs(2), {"seed": config.seed, "stage": 2, "next_epoch": config.epochs(2)})
        save_checkpoint(Path(ckpt_dir) / "final.ntar", final, cfg)
    return params


def train_stage1(cfg: NetworkConfig, params: ParamStore, train: Sequence, config: TrainConfig,
                 val: Sequence | None = None, log=None) -> ParamStore:
    """Single-view training of encoder, decoder and refiner; fusion weights untouched."""
    if not train:
        raise ConfigError("training set is empty")
    params = params.astype(config.dtype)
    adam = AdamState.for_config(config)
    for epoch in range(config.epochs(1)):
        loss = train_epoch(cfg, params, adam, train, config, 1, epoch)
        if log is not None:
            val_iou = evaluate(cfg, params, val, [1]).rows["overall"][0] if val else math.nan
            log(_format_log(1, epoch + 1, lr_at(config, epoch), loss, val_iou, 0.0))
    return params


def train_stage2(cfg: NetworkConfig, params: ParamStore, train: Sequence, config: TrainConfig,
                 val: Sequence | None = None, log=None) -> ParamStore:
    """Joint training of all parameters with a random view count per batch."""
    if not train:
        raise ConfigError("training set is empty")
    params = params.astype(config.dtype)
    adam = AdamState.for_config(config)
    for epoch in range(config.epochs(2)):
        loss = train_epoch(cfg, params, adam, train, config, 2, epoch)
        if log is not None:
            k = min(3, config.n_max)
            val_iou = evaluate(cfg, params, val, [k]).rows["overall"][0] if val else math.nan
            log(_format_log(2, epoch + 1, lr_at(config, epoch), loss, val_iou, 0.0))
    return params
