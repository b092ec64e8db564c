"""Encoder, decoder, fusion and refiner assembled for variants F, A and Toy.

Images of every view go through the same 2D encoder and 3D decoder.  The
decoder produces a coarse occupancy volume per view together with a 9-channel
context (its last 8-channel feature map plus the volume itself).  Coarse
volumes are fused across views and, for variants with a refiner, corrected
by a 3D encoder-decoder with skip connections.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import fusion as fusion_mod
from .errors import ConfigError, ShapeError
from .layers import (LayerSpec, ParamStore, init_params, layer_forward, param_count,
                     run_sequential, shape_chain)
from .tensor import Tensor, concat_channels, reshape, unstack

VARIANTS = ("F", "A", "Toy")

# VGG16 convolutions kept as the 2D backbone: conv1_1 .. conv4_1, pools after each block.
VGG_SLICE = (("1_1", 3, 64), ("1_2", 64, 64), "pool",
             ("2_1", 64, 128), ("2_2", 128, 128), "pool",
             ("3_1", 128, 256), ("3_2", 256, 256), ("3_3", 256, 256), "pool",
             ("4_1", 256, 512))


def _conv_block(kind, name, cin, cout, k, pad, act, alpha=None, stride=1):
    bn = "batchnorm"
    return [LayerSpec(kind, f"{name}.conv", cin, cout, kernel=k, stride=stride, pad=pad, bias=False),
            LayerSpec(bn, f"{name}.bn", cout),
            LayerSpec("activation", f"{name}.act", act=act, alpha=alpha)]


def _pool(kind, name, k):
    return LayerSpec(kind, name, kernel=k, stride=k)


@dataclass
class RefinerSpec:
    """3D encoder-decoder; stage i of the decoder also sees encoder stage 4-i."""

    enc: list[list[LayerSpec]]
    fc: list[LayerSpec]
    dec: list[list[LayerSpec]]

    def all_specs(self) -> list[LayerSpec]:
        return [s for st in self.enc for s in st] + self.fc + [s for st in self.dec for s in st]


@dataclass
class NetworkConfig:
    variant: str
    image_side: int
    resolution: int
    encoder: list[LayerSpec]
    decoder: list[LayerSpec]
    head: list[LayerSpec]
    scoring: list[LayerSpec]
    refiner: RefinerSpec | None
    fusion: bool = True
    feature_len: int = 0
    shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def all_specs(self) -> list[LayerSpec]:
        specs = self.encoder + self.decoder + self.head + self.scoring
        if self.refiner is not None:
            specs += self.refiner.all_specs()
        return specs

    def param_count(self) -> int:
        return param_count(self.all_specs())

    def prefixes(self, part: str) -> tuple[str, ...]:
        return {"encoder": ("enc.",), "decoder": ("dec.",), "fusion": ("fusion.",),
                "refiner": ("ref.",)}[part]

    def describe(self) -> dict:
        """JSON-friendly summary used to key checkpoints to an architecture."""
        return {"variant": self.variant, "image_side": self.image_side,
                "resolution": self.resolution, "fusion": self.fusion,
                "refiner": self.refiner is not None,
                "layers": [[s.kind, s.name, s.in_ch, s.out_ch, s.kernel, s.stride, s.pad]
                           for s in self.all_specs()]}


def _decoder_specs(feature_len: int, channels: Sequence[int], up_layers: int) -> tuple[list, list]:
    """Reshape to (len/8, 2, 2, 2), stride-2 transposed convs, then a 1^3 head."""
    if feature_len % 8:
        raise ConfigError(f"feature length {feature_len} is not divisible by 8")
    cin = feature_len // 8
    specs = [LayerSpec("reshape", "dec.reshape", target=(cin, 2, 2, 2))]
    for i, cout in enumerate(channels[:up_layers], start=1):
        specs += _conv_block("convT3d", f"dec.up{i}", cin, cout, 4, 1, "relu", stride=2)
        cin = cout
    head = [LayerSpec("convT3d", "dec.head.conv", cin, 1, kernel=1, bias=True),
            LayerSpec("activation", "dec.head.act", act="sigmoid")]
    return specs, head


def _refiner_specs(resolution: int, channels: Sequence[int], fc_hidden: int) -> RefinerSpec:
    enc = []
    cin = 1
    for i, cout in enumerate(channels, start=1):
        enc.append(_conv_block("conv3d", f"ref.enc{i}", cin, cout, 4, 2, "leaky_relu", 0.2)
                   + [_pool("maxpool3d", f"ref.enc{i}.pool", 2)])
        cin = cout
    shape = (1,) + (resolution,) * 3
    for stage in enc:
        shape = shape_chain(stage, shape)[-1][1]
    flat = int(np.prod(shape))
    fc = [LayerSpec("fully_connected", "ref.fc1", flat, fc_hidden),
          LayerSpec("activation", "ref.fc1.act", act="relu"),
          LayerSpec("fully_connected", "ref.fc2", fc_hidden, flat),
          LayerSpec("activation", "ref.fc2.act", act="relu"),
          LayerSpec("reshape", "ref.unflatten", target=shape)]
    dec = []
    skip = list(channels[::-1])
    outs = list(channels[-2::-1]) + [1]
    cur = channels[-1]
    for i, (sk, cout) in enumerate(zip(skip, outs), start=1):
        cat = LayerSpec("concat", f"ref.dec{i}.cat")
        if cout == 1:
            stage = [cat, LayerSpec("convT3d", f"ref.dec{i}.conv", cur + sk, 1, kernel=4, stride=2, pad=1, bias=True),
                     LayerSpec("activation", f"ref.dec{i}.act", act="sigmoid")]
        else:
            stage = [cat] + _conv_block("convT3d", f"ref.dec{i}", cur + sk, cout, 4, 1, "relu", stride=2)
        dec.append(stage)
        cur = cout
    return RefinerSpec(enc, fc, dec)


def build_config(variant: str, resolution: int = 32, refiner: bool | None = None,
                 image_side: int | None = None) -> NetworkConfig:
    """Architecture for variant F, A or Toy.

    ``resolution``, ``refiner`` and ``image_side`` only apply to Toy (F and A
    are fixed at 224-pixel input and 32^3 output; F has no refiner, A has one).
    Every intermediate shape is computed and checked here.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    if variant in ("F", "A"):
        side, res = 224, 32
        enc = []
        for item in VGG_SLICE:
            if item == "pool":
                enc.append(_pool("maxpool2d", f"enc.vgg.pool{len(enc)}", 2))
            else:
                tag, cin, cout = item
                enc += _conv_block("conv2d", f"enc.vgg{tag}", cin, cout, 3, 1, "relu")
        if variant == "F":
            enc += _conv_block("conv2d", "enc.conv1", 512, 512, 1, 0, "elu")
            enc += _conv_block("conv2d", "enc.conv2", 512, 256, 3, 0, "elu")
            enc.append(_pool("maxpool2d", "enc.pool", 4))
            enc += _conv_block("conv2d", "enc.conv3", 256, 128, 3, 0, "elu")
            dec_ch = (128, 64, 32, 8)
        else:
            enc += _conv_block("conv2d", "enc.conv1", 512, 512, 3, 0, "elu")
            enc += _conv_block("conv2d", "enc.conv2", 512, 512, 3, 0, "elu")
            enc.append(_pool("maxpool2d", "enc.pool", 3))
            enc += _conv_block("conv2d", "enc.conv3", 512, 256, 1, 0, "elu")
            dec_ch = (512, 128, 32, 8)
        up_layers = 4
        score_ch = fusion_mod.SCORE_CHANNELS
        ref = _refiner_specs(32, (32, 64, 128), 2048) if variant == "A" else None
    else:
        if resolution not in (16, 32):
            raise ConfigError(f"Toy resolution must be 16 or 32, got {resolution}")
        side, res = image_side or 32, resolution
        enc = []
        cin = 3
        for i, cout in enumerate((16, 32, 64), start=1):
            enc += _conv_block("conv2d", f"enc.block{i}", cin, cout, 3, 1, "elu")
            enc.append(_pool("maxpool2d", f"enc.block{i}.pool", 2))
            cin = cout
        up_layers = 4 if res == 32 else 3
        dec_ch = (64, 32, 16, 8)[-up_layers:]
        score_ch = (8, 1)
        ref = _refiner_specs(res, (8, 16, 32), 256) if (refiner is None or refiner) else None
    feat_shape = shape_chain(enc, (3, side, side))[-1][1]
    flen = int(np.prod(feat_shape))
    enc.append(LayerSpec("reshape", "enc.flatten", target=(flen,)))
    dec, head = _decoder_specs(flen, dec_ch, up_layers)
    cfg = NetworkConfig(variant, side, res, enc, dec, head,
                        fusion_mod.scoring_specs(score_ch), ref, True, flen)
    cfg.shapes = _verify_shapes(cfg)
    return cfg


def _verify_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    chain = shape_chain(cfg.encoder, (3, cfg.image_side, cfg.image_side))
    shapes.update(chain)
    feat = chain[-1][1]
    chain = shape_chain(cfg.decoder, feat)
    shapes.update(chain)
    pen = chain[-1][1]
    if pen[0] != 8:
        raise ShapeError(f"decoder penultimate output must have 8 channels, got {pen}")
    chain = shape_chain(cfg.head, pen)
    shapes.update(chain)
    coarse = chain[-1][1]
    if coarse != (1,) + (cfg.resolution,) * 3:
        raise ShapeError(f"decoder output {coarse} does not match resolution {cfg.resolution}")
    score = shape_chain(cfg.scoring, (9,) + coarse[1:])
    shapes.update(score)
    if score[-1][1] != coarse:
        raise ShapeError(f"scoring output {score[-1][1]} differs from {coarse}")
    if cfg.refiner is not None:
        skips = []
        shape = coarse
        for stage in cfg.refiner.enc:
            chain = shape_chain(stage, shape)
            shapes.update(chain)
            shape = chain[-1][1]
            skips.append(shape)
        chain = shape_chain(cfg.refiner.fc, shape)
        shapes.update(chain)
        shape = chain[-1][1]
        for stage, sk in zip(cfg.refiner.dec, skips[::-1]):
            if sk[1:] != shape[1:]:
                raise ShapeError(f"skip {sk} does not match decoder input {shape}")
            shape = (shape[0] + sk[0],) + shape[1:]
            shapes[stage[0].name] = shape
            chain = shape_chain(stage[1:], shape)
            shapes.update(chain)
            shape = chain[-1][1]
        if shape != coarse:
            raise ShapeError(f"refiner output {shape} does not match {coarse}")
    return shapes


def init_model(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    return init_params(cfg.all_specs(), seed, dtype)


def inject_weights(params: ParamStore, arrays: dict[str, np.ndarray], prefix: str = "enc.vgg") -> int:
    """Overwrite entries under ``prefix`` with externally supplied arrays.

    Returns the number of tensors replaced; shapes must match exactly.
    """
    n = 0
    for name, arr in arrays.items():
        if not name.startswith(prefix):
            continue
        if name not in params:
            raise KeyError(f"no parameter named {name!r}")
        if params[name].shape != arr.shape:
            raise ShapeError(f"{name}: shape {arr.shape}, expected {params[name].shape}")
        params[name].data[...] = arr
        n += 1
    return n


@dataclass
class ViewBatch:
    """Images of B samples with n views each, shape (B, n, 3, H, W), values in [0, 1]."""

    images: np.ndarray

    def __post_init__(self):
        if self.images.ndim == 4:
            self.images = self.images[None]
        if self.images.ndim != 5 or self.images.shape[2] != 3:
            raise ShapeError(f"expected (B, n, 3, H, W) images, got {self.images.shape}")
        if self.images.shape[1] < 1:
            raise ShapeError("need at least one view")

    @property
    def n(self) -> int:
        return self.images.shape[1]

    @property
    def batch(self) -> int:
        return self.images.shape[0]


@dataclass
class Reconstruction:
    coarse: list[Tensor]          # per view, (B, 1, R, R, R)
    contexts: list[Tensor]        # per view, (B, 9, R, R, R)
    raw_scores: list[Tensor] | None
    scores: list[Tensor] | None
    fused: Tensor                 # (B, 1, R, R, R)
    refined: Tensor | None

    @property
    def output(self) -> Tensor:
        return self.refined if self.refined is not None else self.fused


def encoder_forward(cfg: NetworkConfig, params: ParamStore, images: Tensor, mode: str = "eval") -> Tensor:
    """(N, 3, H, W) images -> (N, feature_len) features."""
    if images.ndim != 4 or images.shape[2:] != (cfg.image_side, cfg.image_side):
        raise ShapeError(f"expected (N, 3, {cfg.image_side}, {cfg.image_side}) images, got {images.shape}")
    return run_sequential(cfg.encoder, params, images, mode)


def decoder_forward(cfg: NetworkConfig, params: ParamStore, features: Tensor,
                    mode: str = "eval") -> tuple[Tensor, Tensor]:
    """(N, feature_len) -> coarse volumes (N, 1, R, R, R) and contexts (N, 9, R, R, R)."""
    if features.ndim != 2 or features.shape[1] != cfg.feature_len:
        raise ShapeError(f"expected (N, {cfg.feature_len}) features, got {features.shape}")
    pen = run_sequential(cfg.decoder, params, features, mode)
    coarse = run_sequential(cfg.head, params, pen, mode)
    return coarse, concat_channels([pen, coarse])


def refiner_forward(cfg: NetworkConfig, params: ParamStore, fused: Tensor, mode: str = "eval") -> Tensor:
    """(B, 1, R, R, R) fused volume -> refined volume of the same shape."""
    if cfg.refiner is None:
        raise ConfigError(f"variant {cfg.variant} has no refiner")
    x = fused
    skips = []
    for stage in cfg.refiner.enc:
        x = run_sequential(stage, params, x, mode)
        skips.append(x)
    x = run_sequential(cfg.refiner.fc, params, x, mode)
    for stage, sk in zip(cfg.refiner.dec, skips[::-1]):
        x = layer_forward(stage[0], params, [x, sk], mode)
        x = run_sequential(stage[1:], params, x, mode)
    return x


def model_forward(cfg: NetworkConfig, params: ParamStore, batch: ViewBatch | np.ndarray,
                  mode: str = "eval", fusion: str = "context", canonical: bool = False) -> Reconstruction:
    """Full pipeline on B samples with n views each.

    ``fusion`` selects the context-aware ("context") or averaging ("average")
    fusion.  With a single view the fused volume is the coarse volume itself
    and the scoring network is not evaluated.  ``canonical`` (eval mode
    only) makes the result bitwise invariant to the order of the views.
    """
    if not isinstance(batch, ViewBatch):
        batch = ViewBatch(np.asarray(batch))
    if fusion not in fusion_mod.FUSIONS:
        raise ConfigError(f"unknown fusion {fusion!r}")
    b, n = batch.batch, batch.n
    dtype = params[f"{cfg.encoder[0].name}.weight"].dtype
    vol = (cfg.resolution,) * 3
    score = n > 1 and fusion == "context" and cfg.fusion
    raw = scores = None
    if canonical:
        if mode == "train":
            raise ConfigError("canonical evaluation requires eval mode")
        # one view at a time, so no computation depends on the position of a view
        coarse, contexts, raw = [], [], []
        for r in range(n):
            img = Tensor(batch.images[:, r].astype(dtype, copy=False))
            c, ctx = decoder_forward(cfg, params, encoder_forward(cfg, params, img, mode), mode)
            coarse.append(c)
            contexts.append(ctx)
            if score:
                raw.append(fusion_mod.context_score(cfg.scoring, params, ctx, mode))
    else:
        imgs = Tensor(batch.images.reshape((b * n,) + batch.images.shape[2:]).astype(dtype, copy=False))
        feats = encoder_forward(cfg, params, imgs, mode)
        coarse_all, ctx_all = decoder_forward(cfg, params, feats, mode)
        coarse = unstack(reshape(coarse_all, (b, n, 1) + vol), axis=1)
        contexts = unstack(reshape(ctx_all, (b, n, 9) + vol), axis=1)
        if score:
            raw_all = fusion_mod.context_score(cfg.scoring, params, ctx_all, mode)
            raw = unstack(reshape(raw_all, (b, n, 1) + vol), axis=1)
    if n == 1:
        fused = coarse[0]
        raw = None
    elif not score:
        fused = fusion_mod.fuse_average(coarse, canonical)
        raw = None
    else:
        scores = fusion_mod.normalize_scores(raw, canonical)
        fused = fusion_mod.fuse_weighted(coarse, scores, canonical)
    refined = refiner_forward(cfg, params, fused, mode) if cfg.refiner is not None else None
    return Reconstruction(coarse, contexts, raw, scores, fused, refined)
