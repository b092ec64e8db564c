"""Voxel-wise binary cross entropy and thresholded intersection over union."""
from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, make_result, accumulate

EPS = 1e-7
THRESHOLD = 0.3


def _gt_array(gt) -> np.ndarray:
    a = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if not np.all((a == 0) | (a == 1)):
        raise ContractError("ground truth must be binary (0/1)")
    return a


def bce_loss(p: Tensor, gt) -> Tensor:
    """Mean over voxels of -[gt log p + (1 - gt) log(1 - p)].

    ``p`` is clamped to [EPS, 1 - EPS] before the logs; the clamp passes no
    gradient outside that interval.
    """
    g = _gt_array(gt)
    if p.shape != g.shape:
        raise ShapeError(f"bce_loss: prediction {p.shape} vs ground truth {g.shape}")
    x = p.data.astype(np.float64)
    ph = np.clip(x, EPS, 1 - EPS)
    n = x.size
    value = -np.sum(g * np.log(ph) + (1 - g) * np.log1p(-ph)) / n
    inside = (x >= EPS) & (x <= 1 - EPS)

    def bw(grad):
        d = (ph - g) / (ph * (1 - ph)) / n * inside
        accumulate(p, (float(grad) * d).astype(p.dtype))

    return make_result(np.asarray(value, dtype=p.dtype), (p,), bw)


def binarize(p, t: float = THRESHOLD) -> np.ndarray:
    """Occupied where p > t (strict)."""
    a = p.data if isinstance(p, Tensor) else np.asarray(p)
    return a > t


def iou(p, gt, t: float = THRESHOLD) -> float:
    """|binarize(p) and gt| / |binarize(p) or gt|; 1.0 when both sets are empty."""
    g = _gt_array(gt).astype(bool)
    b = binarize(p, t)
    if b.shape != g.shape:
        raise ShapeError(f"iou: prediction {b.shape} vs ground truth {g.shape}")
    union = np.count_nonzero(b | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(b & g) / union
