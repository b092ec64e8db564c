"""Context-aware fusion of per-view coarse volumes, plus the averaging baseline.

A shared scoring network maps each view's 9-channel context to a raw score
map.  Scores are normalized per voxel with a softmax across views and the
fused volume is the score-weighted sum of the coarse volumes.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .layers import LayerSpec, ParamStore, run_sequential
from .tensor import Tensor, accumulate, make_result, mul, stack_views, unstack

SCORE_CHANNELS = (9, 16, 8, 4, 1)


def scoring_specs(channels: Sequence[int] = SCORE_CHANNELS, prefix: str = "fusion",
                  alpha: float = 0.2) -> list[LayerSpec]:
    """3^3 convolutions (padding 1), each followed by batchnorm and leaky ReLU.

    ``channels`` lists output channels; the input always has 9.
    """
    specs = []
    cin = 9
    for i, cout in enumerate(channels, start=1):
        specs += [
            LayerSpec("conv3d", f"{prefix}.conv{i}", cin, cout, kernel=3, pad=1, bias=False),
            LayerSpec("batchnorm", f"{prefix}.bn{i}", cout),
            LayerSpec("activation", f"{prefix}.act{i}", act="leaky_relu", alpha=alpha),
        ]
        cin = cout
    return specs


def context_score(specs: Sequence[LayerSpec], params: ParamStore, context: Tensor,
                  mode: str = "eval") -> Tensor:
    """Raw score map (N, 1, R, R, R) for a batch of contexts (N, 9, R, R, R).

    All views go through the same weights; batchnorm statistics in train mode
    are taken over the whole batch of views.
    """
    if context.ndim != 5 or context.shape[1] != 9:
        raise ShapeError(f"context must be (N, 9, R, R, R), got {context.shape}")
    return run_sequential(specs, params, context, mode)


def _ordered_sum(stack: np.ndarray, canonical: bool) -> np.ndarray:
    """Sum over axis 0 in a fixed order: view index, or ascending value."""
    if canonical:
        stack = np.sort(stack, axis=0)
    total = stack[0].copy()
    for r in range(1, stack.shape[0]):
        total += stack[r]
    return total


def _softmax_views(raw: Tensor, canonical: bool) -> Tensor:
    m = raw.data
    e = np.exp(m - m.max(axis=0, keepdims=True))
    s = e / _ordered_sum(e, canonical)

    def bw(g):
        accumulate(raw, s * (g - (s * g).sum(axis=0, keepdims=True)))

    return make_result(s, (raw,), bw)


def _check_views(maps: Sequence[Tensor], what: str) -> None:
    if len(maps) == 0:
        raise ContractError(f"{what}: need at least one view")
    for t in maps[1:]:
        if t.shape != maps[0].shape:
            raise ShapeError(f"{what}: view shapes differ, {maps[0].shape} vs {t.shape}")


def normalize_scores(raw: Sequence[Tensor], canonical: bool = False) -> list[Tensor]:
    """Per-voxel softmax across the n raw score maps.

    The per-position maximum is subtracted before exponentiation.  The
    denominator is accumulated in ascending view order, or in ascending value
    order when ``canonical`` is set, which makes the result bitwise invariant
    to the order of the views.
    """
    _check_views(raw, "normalize_scores")
    if len(raw) == 1:
        return [Tensor(np.ones_like(raw[0].data))]
    return unstack(_softmax_views(stack_views(raw), canonical))


def _view_sum(stacked: Tensor, canonical: bool) -> Tensor:
    return make_result(_ordered_sum(stacked.data, canonical), (stacked,),
                       lambda g: accumulate(stacked, np.broadcast_to(g, stacked.shape)))


def fuse_weighted(coarse: Sequence[Tensor], scores: Sequence[Tensor], canonical: bool = False) -> Tensor:
    """Sum over views of score times coarse volume, elementwise."""
    _check_views(coarse, "fuse_weighted")
    if len(scores) != len(coarse):
        raise ShapeError(f"fuse_weighted: {len(coarse)} volumes but {len(scores)} score maps")
    for s in scores:
        if s.shape != coarse[0].shape:
            raise ShapeError(f"fuse_weighted: score shape {s.shape} != volume shape {coarse[0].shape}")
    products = [mul(s, v) for s, v in zip(scores, coarse)]
    if len(products) == 1:
        return products[0]
    return _view_sum(stack_views(products), canonical)


def fuse_average(coarse: Sequence[Tensor], canonical: bool = False) -> Tensor:
    """Mean of the coarse volumes, computed as ``fuse_weighted`` with weights 1/n."""
    _check_views(coarse, "fuse_average")
    n = len(coarse)
    w = np.full(coarse[0].shape, 1.0 / n, dtype=coarse[0].dtype)
    return fuse_weighted(coarse, [Tensor(w) for _ in range(n)], canonical)


FUSIONS = ("context", "average")
