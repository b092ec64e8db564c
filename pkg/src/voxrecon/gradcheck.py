"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor, no_grad


def _value(out) -> float:
    if isinstance(out, Tensor):
        if out.size != 1:
            raise ContractError(f"gradcheck needs a scalar function, got shape {out.shape}")
        return float(out.data.reshape(-1)[0])
    return float(out)


def _central(f, flat, i, eps) -> float:
    orig = flat[i]
    with no_grad():
        flat[i] = orig + eps
        up = _value(f())
        flat[i] = orig - eps
        down = _value(f())
    flat[i] = orig
    return (up - down) / (2 * eps)


@dataclass
class GradcheckReport:
    max_rel_error: float
    probed: int
    redrawn: int          # coordinates skipped because f is not smooth at the step scale
    worst_tensor: int = -1  # position in ``params`` of the largest error

    def __float__(self) -> float:
        return self.max_rel_error


def _smooth_estimate(f, flat, i, ladder, tol) -> float | None:
    # first step size whose estimate survives halving; None if every rung straddles a kink
    for eps in ladder:
        coarse, fine = _central(f, flat, i, eps), _central(f, flat, i, eps / 2)
        if abs(coarse - fine) <= tol * max(abs(coarse), abs(fine), 1e-12):
            return fine
    return None


def finite_difference_gradcheck(f: Callable[[], Tensor], params: Tensor | Sequence[Tensor],
                                eps: float | Sequence[float] = 1e-6, max_coords: int | None = None,
                                seed: int = 0, smooth_tol: float | None = None,
                                min_scale: float = 0.0, report: bool = False):
    """Max relative error between backprop gradients and central differences.

    ``f`` takes no arguments and reads the current values of ``params``,
    which are perturbed in place and restored.  With ``max_coords`` only that
    many coordinates per tensor are probed, drawn with ``seed``.  The error of
    a coordinate is ``|a - n| / max(1e-12, |a| + |n|)``.

    With ``smooth_tol`` set, ``eps`` may be a decreasing ladder of steps and
    every probe is repeated at half the step.  The first rung where the two
    estimates agree within ``smooth_tol`` (relative) supplies the halved-step
    estimate.  Large steps keep roundoff small for tiny gradients; small
    steps dodge the kinks of piecewise-linear activations.  A coordinate for
    which no rung agrees is replaced by another one (at most 10
    redraws per probed coordinate).

    ``min_scale`` also redraws coordinates where both the analytic and the
    numeric derivative are below ``min_scale`` times the largest analytic
    entry of the tensor: there the loss changes by a few ulps per step and
    the difference quotient carries no relative precision.
    """
    ladder = (eps,) if np.isscalar(eps) else tuple(eps)
    if not ladder or min(ladder) <= 0:
        raise ContractError("eps must be positive")
    if isinstance(params, Tensor):
        params = [params]
    for p in params:
        p.grad = None
        p.requires_grad = True
    loss = f()
    base = _value(loss)
    with no_grad():
        again = _value(f())
    if again != base:
        raise ContractError("function is not deterministic: two evaluations differ")
    loss.backward()
    rng = np.random.default_rng(seed)
    worst, worst_at = 0.0, -1
    probed = redrawn = 0
    for k, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        if max_coords is not None and flat.size > max_coords:
            pool = list(rng.permutation(flat.size))
            budget = max_coords
        else:
            pool = list(range(flat.size))
            budget = flat.size
        spare = 10 * budget if smooth_tol is not None or min_scale > 0 else 0
        floor = min_scale * float(np.abs(analytic).max())
        while budget and pool:
            i = pool.pop(0)
            if smooth_tol is None:
                numeric = _central(f, flat, i, ladder[0])
            else:
                numeric = _smooth_estimate(f, flat, i, ladder, smooth_tol)
                if numeric is None:
                    if spare:
                        spare -= 1
                        redrawn += 1
                        continue
                    numeric = _central(f, flat, i, ladder[-1] / 2)
            a = float(analytic.reshape(-1)[i])
            if max(abs(a), abs(numeric)) < floor and spare:
                spare -= 1
                redrawn += 1
                continue
            budget -= 1
            probed += 1
            err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
            if err > worst:
                worst, worst_at = err, k
    if report:
        return GradcheckReport(worst, probed, redrawn, worst_at)
    return worst


gradcheck = finite_difference_gradcheck


def model_gradcheck(variant: str = "Toy", resolution: int = 16, refiner: bool = True,
                    batch: int = 2, views: int = 2, coords: int = 2, seed: int = 0,
                    eps: Sequence[float] = (1e-6, 1e-7), smooth_tol: float = 1e-5,
                    min_scale: float = 1e-3) -> GradcheckReport:
    """Finite-difference check of the whole network in float64.

    The loss is BCE of the output (plus BCE of the fused volume when a
    refiner is present) against a random binary target, evaluated in train
    mode on noise images so that max-pooling windows have no ties.  ``coords``
    coordinates of every parameter tensor are probed; those sitting within a
    step of an activation kink at every rung of ``eps`` are redrawn (see
    ``smooth_tol``), as are derivatives too small to resolve (``min_scale``).
    """
    from .model import build_config, init_model, model_forward
    from .objective import bce_loss
    from .tensor import add

    cfg = build_config(variant, resolution, refiner) if variant == "Toy" else build_config(variant)
    params = init_model(cfg, seed, np.float64)
    rng = np.random.default_rng(seed)
    images = rng.random((batch, views, 3, cfg.image_side, cfg.image_side))
    gt = (rng.random((batch, 1) + (cfg.resolution,) * 3) > 0.5).astype(np.float64)
    trainable = [t for _, t in params.trainable()]
    buffers = {k: t.data.copy() for k, t in params.items() if k.rsplit(".", 1)[1] in ("running_mean", "running_var")}

    def f():
        # running statistics are updated in train mode; keep every evaluation identical
        for k, v in buffers.items():
            params[k].data[...] = v
        rec = model_forward(cfg, params, images, "train")
        loss = bce_loss(rec.output, gt)
        if rec.refined is not None:
            loss = add(loss, bce_loss(rec.fused, gt))
        return loss

    return finite_difference_gradcheck(f, trainable, eps=eps, max_coords=coords, seed=seed,
                                       smooth_tol=smooth_tol, min_scale=min_scale, report=True)
