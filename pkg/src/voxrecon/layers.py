"""Named, parameterized layers: specs, parameter stores, dispatch and accounting."""
from __future__ import annotations

import os
import zlib
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import nnops
from .archive import load_archive, save_archive
from .errors import (ArchiveShapeError, ConfigError, MissingEntryError, ShapeError,
                     UnknownEntryError)
from .tensor import Tensor, activation, concat_channels, reshape

KINDS = ("conv2d", "conv3d", "convT3d", "maxpool2d", "maxpool3d", "batchnorm",
         "fully_connected", "activation", "concat", "reshape")

BUFFERS = ("running_mean", "running_var")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network.

    ``in_ch``/``out_ch`` are channel counts (features for fully connected
    layers, channels for batchnorm).  ``target`` is the per-sample shape of a
    reshape.  ``act``/``alpha`` describe an activation layer.
    """

    kind: str
    name: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    bias: bool = True
    act: str | None = None
    alpha: float | None = None
    target: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"{self.name}: unknown layer kind {self.kind!r}")

    @property
    def spatial_dims(self) -> int:
        return 2 if self.kind in ("conv2d", "maxpool2d") else 3

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Learnable tensors of this layer."""
        k = self.kernel
        if self.kind in ("conv2d", "conv3d"):
            d = self.spatial_dims
            shapes = {"weight": (self.out_ch, self.in_ch) + (k,) * d}
        elif self.kind == "convT3d":
            shapes = {"weight": (self.in_ch, self.out_ch, k, k, k)}
        elif self.kind == "fully_connected":
            shapes = {"weight": (self.out_ch, self.in_ch)}
        elif self.kind == "batchnorm":
            return {"gamma": (self.in_ch,), "beta": (self.in_ch,)}
        else:
            return {}
        if self.bias:
            shapes["bias"] = (self.out_ch,)
        return shapes

    def buffer_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "batchnorm":
            return {b: (self.in_ch,) for b in BUFFERS}
        return {}

    def fan_in(self) -> int:
        k = self.kernel
        if self.kind == "conv2d":
            return self.in_ch * k * k
        if self.kind == "conv3d":
            return self.in_ch * k ** 3
        if self.kind == "convT3d":
            # inputs reaching one output voxel
            return max(1, self.in_ch * k ** 3 // self.stride ** 3)
        return self.in_ch

    def output_shape(self, shape: Sequence[int]) -> tuple[int, ...]:
        """Per-sample output shape (no batch axis) for a per-sample input shape."""
        shape = tuple(shape)
        kind = self.kind
        if kind in ("conv2d", "conv3d", "convT3d", "maxpool2d", "maxpool3d"):
            d = self.spatial_dims
            if len(shape) != d + 1:
                raise ShapeError(f"{self.name}: expected {d + 1}-D input, got {shape}")
            c, sp = shape[0], shape[1:]
            if kind.startswith("maxpool"):
                out = tuple(nnops.pool_out_extent(n, self.kernel, self.stride) for n in sp)
                ch = c
            else:
                if c != self.in_ch:
                    raise ShapeError(f"{self.name}: input has {c} channels, expected {self.in_ch}")
                if kind == "convT3d":
                    out = tuple(nnops.conv_transpose_out_extent(n, self.kernel, self.stride, self.pad) for n in sp)
                else:
                    out = tuple(nnops.conv_out_extent(n, self.kernel, self.stride, self.pad) for n in sp)
                ch = self.out_ch
            if any(e < 1 for e in out):
                raise ShapeError(f"{self.name}: non-positive output extent {out}")
            return (ch,) + out
        if kind == "fully_connected":
            if int(np.prod(shape)) != self.in_ch:
                raise ShapeError(f"{self.name}: expected ({self.in_ch},), got {shape}")
            return (self.out_ch,)
        if kind == "batchnorm":
            if shape[0] != self.in_ch:
                raise ShapeError(f"{self.name}: expected {self.in_ch} channels, got {shape}")
            return shape
        if kind == "reshape":
            if int(np.prod(shape)) != int(np.prod(self.target)):
                raise ShapeError(f"{self.name}: cannot reshape {shape} to {self.target}")
            return tuple(self.target)
        return shape


def shape_chain(specs: Sequence[LayerSpec], in_shape: Sequence[int]) -> list[tuple[str, tuple[int, ...]]]:
    """Symbolic forward pass over a sequential spec list: (name, output shape) per layer."""
    chain = []
    shape = tuple(in_shape)
    for spec in specs:
        shape = spec.output_shape(shape)
        chain.append((spec.name, shape))
    return chain


class ParamStore:
    """Flat mapping "layer.param" -> Tensor, covering learnable tensors and buffers."""

    def __init__(self, entries: Mapping[str, Tensor] | None = None):
        self._entries: dict[str, Tensor] = dict(entries or {})

    def __getitem__(self, key: str) -> Tensor:
        return self._entries[key]

    def __setitem__(self, key: str, value: Tensor) -> None:
        self._entries[key] = value

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def keys(self):
        return self._entries.keys()

    def get(self, layer: str, param: str) -> Tensor:
        return self._entries[f"{layer}.{param}"]

    def trainable(self, prefixes: Iterable[str] | None = None) -> list[tuple[str, Tensor]]:
        out = []
        for name, t in self._entries.items():
            if name.rsplit(".", 1)[1] in BUFFERS:
                continue
            if prefixes is not None and not any(name.startswith(p) for p in prefixes):
                continue
            out.append((name, t))
        return out

    def update(self, other: "ParamStore") -> None:
        self._entries.update(other._entries)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._entries.items()}

    def copy(self) -> "ParamStore":
        return ParamStore({k: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                           for k, t in self._entries.items()})

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
                           for k, t in self._entries.items()})

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def equal(self, other: "ParamStore") -> bool:
        """Bitwise equality of names, dtypes and values."""
        if list(self._entries) != list(other._entries):
            return False
        for k, t in self._entries.items():
            o = other._entries[k].data
            if t.data.dtype != o.dtype or t.data.shape != o.shape:
                return False
            if t.data.tobytes() != o.tobytes():
                return False
        return True


def _expected_entries(specs: Iterable[LayerSpec]) -> dict[str, tuple[int, ...]]:
    out = {}
    for spec in specs:
        for p, shape in {**spec.param_shapes(), **spec.buffer_shapes()}.items():
            out[f"{spec.name}.{p}"] = shape
    return out


def init_params(specs: Sequence[LayerSpec], seed: int, dtype=np.float32) -> ParamStore:
    """He-normal weights, zero biases, unit gamma, zero beta, running stats (0, 1).

    Each layer draws from its own stream keyed by (seed, layer name), so a
    layer's initial values do not depend on the rest of the network.
    """
    names = [s.name for s in specs]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ConfigError(f"duplicate layer names: {dupes}")
    store = ParamStore()
    for spec in specs:
        for p, shape in spec.param_shapes().items():
            if p == "weight":
                rng = np.random.default_rng([seed, zlib.crc32(spec.name.encode())])
                data = (rng.standard_normal(shape) * np.sqrt(2.0 / spec.fan_in())).astype(dtype)
            elif p == "gamma":
                data = np.ones(shape, dtype=dtype)
            else:
                data = np.zeros(shape, dtype=dtype)
            store[f"{spec.name}.{p}"] = Tensor(data, requires_grad=True)
        for b, shape in spec.buffer_shapes().items():
            fill = np.zeros if b == "running_mean" else np.ones
            store[f"{spec.name}.{b}"] = Tensor(fill(shape, dtype=dtype))
    return store


def param_count(specs: Iterable[LayerSpec]) -> int:
    """Number of learnable scalars; running statistics are excluded."""
    return sum(int(np.prod(s)) for spec in specs for s in spec.param_shapes().values())


def layer_forward(spec: LayerSpec, params: ParamStore, x, mode: str = "eval"):
    """Apply one layer.  ``x`` is a Tensor with a batch axis, or a list for concat."""
    try:
        return _dispatch(spec, params, x, mode)
    except ShapeError as exc:
        if str(exc).startswith(f"{spec.name}:"):
            raise
        raise ShapeError(f"{spec.name}: {exc}") from exc


def _dispatch(spec: LayerSpec, params: ParamStore, x, mode: str):
    kind = spec.kind
    w = params.get(spec.name, "weight") if kind in ("conv2d", "conv3d", "convT3d", "fully_connected") else None
    b = params.get(spec.name, "bias") if (w is not None and spec.bias) else None
    if kind in ("conv2d", "conv3d"):
        return nnops.conv(x, w, b, spec.stride, spec.pad, dims=spec.spatial_dims)
    if kind == "convT3d":
        return nnops.conv_transpose3d(x, w, b, spec.stride, spec.pad)
    if kind in ("maxpool2d", "maxpool3d"):
        return nnops.maxpool(x, spec.kernel, spec.stride, dims=spec.spatial_dims)
    if kind == "batchnorm":
        return nnops.batchnorm(x, params.get(spec.name, "gamma"), params.get(spec.name, "beta"),
                               params.get(spec.name, "running_mean").data,
                               params.get(spec.name, "running_var").data,
                               training=(mode == "train"))
    if kind == "fully_connected":
        if x.ndim != 2:
            x = reshape(x, (x.shape[0], -1))
        return nnops.linear(x, w, b)
    if kind == "activation":
        return activation(spec.act, x, spec.alpha)
    if kind == "concat":
        return concat_channels(x)
    if kind == "reshape":
        return reshape(x, (x.shape[0],) + tuple(spec.target))
    raise ConfigError(f"unknown layer kind {kind!r}")


def run_sequential(specs: Sequence[LayerSpec], params: ParamStore, x: Tensor, mode: str) -> Tensor:
    for spec in specs:
        x = layer_forward(spec, params, x, mode)
    return x


def save_params(store: ParamStore, path: str | os.PathLike, meta: Mapping | None = None) -> None:
    save_archive(path, store.arrays(), meta)


def params_from_arrays(arrays: Mapping[str, np.ndarray], specs: Sequence[LayerSpec] | None = None) -> ParamStore:
    if specs is not None:
        expected = _expected_entries(specs)
        for name, shape in expected.items():
            if name not in arrays:
                raise MissingEntryError(f"archive lacks {name!r} (layer {name.rsplit('.', 1)[0]!r})")
            if tuple(arrays[name].shape) != shape:
                raise ArchiveShapeError(f"{name!r}: archive shape {arrays[name].shape}, expected {shape}")
        extra = sorted(set(arrays) - set(expected))
        if extra:
            raise UnknownEntryError(f"archive has unknown entries {extra}")
    return ParamStore({k: Tensor(v, requires_grad=k.rsplit(".", 1)[-1] not in BUFFERS)
                       for k, v in arrays.items()})


def load_params(path: str | os.PathLike, specs: Sequence[LayerSpec] | None = None) -> ParamStore:
    """Read a named-tensor archive, validating names and shapes against ``specs``."""
    arrays, _ = load_archive(path)
    return params_from_arrays(arrays, specs)
