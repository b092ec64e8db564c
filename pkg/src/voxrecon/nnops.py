"""Convolution, transposed convolution, pooling, batch normalization, linear.

Inputs follow the NC + spatial layout (NCHW or NCDHW).  Internally the
kernels work on (C, N, *spatial) arrays.  Strided convolutions are split
into stride-1 pieces, and each stride-1 piece runs as a single GEMM plus
contiguous shifted adds on a flattened grid.  The batch is processed in chunks to bound
buffer sizes; every loop runs in a fixed order, so results are reproducible
bit for bit.
"""
from __future__ import annotations

import itertools

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, accumulate, make_result

# upper bound on the number of elements in a column buffer
_CHUNK_ELEMS = 1 << 24


def conv_out_extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv_transpose_out_extent(n: int, k: int, s: int, p: int) -> int:
    return (n - 1) * s - 2 * p + k


def pool_out_extent(n: int, k: int, s: int) -> int:
    return (n - k) // s + 1


def _to_cn(a: np.ndarray) -> np.ndarray:
    return a.swapaxes(0, 1)


def _from_cn(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.swapaxes(0, 1))


def _chunks(n: int, per_item: int):
    step = max(1, _CHUNK_ELEMS // max(per_item, 1))
    return [(i, min(n, i + step)) for i in range(0, n, step)]


# Stride-1 kernels on a flattened grid.  With the spatial axes of a
# (C, n, *S) block flattened, the window shifted by kernel offset o starts at
# the flat position dot(o, row strides of S), so every tap is a contiguous
# slice.  Results are computed on the whole grid and cropped afterwards.
#
# The taps of the trailing kernel axes are gathered into a column matrix
# (input side); those of the leading axes are applied after the GEMM as
# shifted adds (output side).  The split point is chosen to minimize the
# number of full-grid passes.

def _flat_offsets(grid, kernel, axes=None):
    steps = np.cumprod((1,) + tuple(grid[::-1]))[:-1][::-1]
    axes = range(len(kernel)) if axes is None else axes
    ranges = [range(kernel[i]) if i in axes else range(1) for i in range(len(kernel))]
    return [int(np.dot(o, steps)) for o in itertools.product(*ranges)]


def _split_point(c: int, o: int, kernel) -> int:
    best, best_cost = 0, None
    for q in range(len(kernel) + 1):
        h = int(np.prod(kernel[:q]))
        g = int(np.prod(kernel[q:]))
        cost = (3 * c * g if g > 1 else c) + (3 * o * h if h > 1 else o)
        if best_cost is None or cost < best_cost:
            best, best_cost = q, cost
    return best


def _embed(g: np.ndarray, grid, lead=None) -> np.ndarray:
    """Place g: (C, n, *out) at per-axis offsets ``lead`` of a zero (C, n, *grid) array, flattened."""
    lead = lead or (0,) * (g.ndim - 2)
    full = np.zeros(g.shape[:2] + tuple(grid), dtype=g.dtype)
    full[(slice(None), slice(None)) + tuple(slice(a, a + e) for a, e in zip(lead, g.shape[2:]))] = g
    return full.reshape(g.shape[0], -1)


def _crop_grid(flat: np.ndarray, n: int, grid, out_sp) -> np.ndarray:
    full = flat.reshape((flat.shape[0], n) + tuple(grid))
    return full[(slice(None), slice(None)) + tuple(slice(0, e) for e in out_sp)]


def _c1_flat(xf: np.ndarray, w: np.ndarray, grid) -> np.ndarray:
    """Valid stride-1 correlation on flattened grids: (C, T) -> (O, T), tail garbage-free zeros."""
    c, total = xf.shape
    o, kernel = w.shape[0], w.shape[2:]
    q = _split_point(c, o, kernel)
    d = len(kernel)
    offs_h = _flat_offsets(grid, kernel, range(q))
    offs_g = _flat_offsets(grid, kernel, range(q, d))
    n_h, n_g = len(offs_h), len(offs_g)
    span = total - offs_g[-1]
    length = span - offs_h[-1]
    if n_g == 1:
        cols = xf
    else:
        cols = np.empty((c, n_g, span), dtype=xf.dtype)
        for j, off in enumerate(offs_g):
            cols[:, j] = xf[:, off:off + span]
        cols = cols.reshape(c * n_g, span)
    wm = w.reshape(o, c, n_h, n_g).transpose(2, 0, 1, 3).reshape(n_h * o, c * n_g)
    res = np.zeros((o, total), dtype=xf.dtype)
    if n_h == 1:
        res[:, :length] = wm @ cols[:, :length]
    else:
        y = (wm @ cols).reshape(n_h, o, span)
        acc = res[:, :length]
        for j, off in enumerate(offs_h):
            acc += y[j, :, off:off + length]
    return res


def _c1_forward(x: np.ndarray, w: np.ndarray, out_sp) -> np.ndarray:
    """Valid stride-1 correlation. x: (C, n, *S), w: (O, C, *K) -> (O, n, *out_sp)."""
    c, n = x.shape[:2]
    res = _c1_flat(x.reshape(c, -1), w, x.shape[2:])
    return _crop_grid(res, n, x.shape[2:], out_sp)


def _c1_adjoint(g: np.ndarray, w: np.ndarray, grid) -> np.ndarray:
    """Adjoint of ``_c1_forward``: g: (O, n, *out) -> (C, n, *grid).

    This is a full correlation with the flipped, transposed kernel.
    """
    n = g.shape[1]
    kernel = w.shape[2:]
    lead = tuple(k - 1 for k in kernel)
    big = tuple(e + k - 1 for e, k in zip(grid, kernel))
    wf = np.ascontiguousarray(np.flip(w, axis=tuple(range(2, w.ndim))).swapaxes(0, 1))
    res = _c1_flat(_embed(g, big, lead), wf, big)
    return np.ascontiguousarray(_crop_grid(res, n, big, grid))


def _c1_weight_grad(x: np.ndarray, g: np.ndarray, kernel) -> np.ndarray:
    """Gradient of <g, _c1_forward(x, w)> with respect to w."""
    c = x.shape[0]
    o = g.shape[0]
    grid = x.shape[2:]
    d = len(kernel)
    q = _split_point(c, o, kernel)
    offs_h = _flat_offsets(grid, kernel, range(q))
    offs_g = _flat_offsets(grid, kernel, range(q, d))
    xf = x.reshape(c, -1)
    span = xf.shape[1] - offs_g[-1]
    length = span - offs_h[-1]
    if len(offs_g) == 1:
        cols = xf
    else:
        cols = np.empty((c, len(offs_g), span), dtype=x.dtype)
        for j, off in enumerate(offs_g):
            cols[:, j] = xf[:, off:off + span]
        cols = cols.reshape(-1, span)
    gf = _embed(g, grid)[:, :length]
    gw = np.empty((len(offs_h), o, cols.shape[0]), dtype=g.dtype)
    for j, off in enumerate(offs_h):
        gw[j] = gf @ cols[:, off:off + length].T
    gw = gw.reshape(len(offs_h), o, c, len(offs_g)).transpose(1, 2, 0, 3)
    return gw.reshape((o, c) + tuple(kernel))


# A stride-s correlation splits into s^d stride-1 correlations, one per
# residue class of the kernel offsets: tap k reads input s*i + k, which is
# entry i + k // s of the phase grid x[..., k % s :: s].

def _phases(kernel, stride):
    return list(itertools.product(*(range(min(stride, k)) for k in kernel)))


def _phase_slices(phase, stride, sizes):
    return tuple(slice(a, a + stride * (m - 1) + 1, stride) for a, m in zip(phase, sizes))


def _phase_setup(phase, stride, kernel, out_sp):
    sub_k = tuple(len(range(a, k, stride)) for a, k in zip(phase, kernel))
    grid = tuple(e + t - 1 for e, t in zip(out_sp, sub_k))
    wsel = (slice(None), slice(None)) + tuple(slice(a, None, stride) for a in phase)
    return sub_k, grid, wsel


def _correlate(xp: np.ndarray, w: np.ndarray, stride: int, out_sp) -> np.ndarray:
    """xp: (C, N, *S) padded input; w: (O, C, *K) -> (O, N, *out_sp)."""
    c, n = xp.shape[:2]
    o, kernel = w.shape[0], w.shape[2:]
    out = np.zeros((o, n) + tuple(out_sp), dtype=xp.dtype)
    per = (c + o) * int(np.prod(xp.shape[2:])) * max(1, int(np.prod(kernel)) // stride ** len(kernel))
    for lo, hi in _chunks(n, per):
        part = out[:, lo:hi]
        for phase in _phases(kernel, stride):
            sub_k, grid, wsel = _phase_setup(phase, stride, kernel, out_sp)
            xs = np.ascontiguousarray(xp[(slice(None), slice(lo, hi)) + _phase_slices(phase, stride, grid)])
            part += _c1_forward(xs, np.ascontiguousarray(w[wsel]), out_sp)
    return out


def _correlate_adjoint(g: np.ndarray, w: np.ndarray, stride: int, in_sp) -> np.ndarray:
    """Scatter g: (O, N, *out_sp) back through w: (O, C, *K) -> (C, N, *in_sp)."""
    o, n = g.shape[:2]
    out_sp = g.shape[2:]
    c, kernel = w.shape[1], w.shape[2:]
    res = np.zeros((c, n) + tuple(in_sp), dtype=g.dtype)
    per = (c + o) * int(np.prod(in_sp)) * max(1, int(np.prod(kernel)) // stride ** len(kernel))
    for lo, hi in _chunks(n, per):
        gc = g[:, lo:hi]
        for phase in _phases(kernel, stride):
            sub_k, grid, wsel = _phase_setup(phase, stride, kernel, out_sp)
            res[(slice(None), slice(lo, hi)) + _phase_slices(phase, stride, grid)] += \
                _c1_adjoint(gc, np.ascontiguousarray(w[wsel]), grid)
    return res


def _correlate_weight_grad(xp: np.ndarray, g: np.ndarray, stride: int, kernel) -> np.ndarray:
    """d<g, correlate(xp, w)>/dw for xp: (C, N, *S), g: (O, N, *out_sp)."""
    c, n = xp.shape[:2]
    o = g.shape[0]
    out_sp = g.shape[2:]
    gw = np.zeros((o, c) + tuple(kernel), dtype=g.dtype)
    per = (c + o) * int(np.prod(xp.shape[2:]))
    for lo, hi in _chunks(n, per):
        for phase in _phases(kernel, stride):
            sub_k, grid, wsel = _phase_setup(phase, stride, kernel, out_sp)
            xs = np.ascontiguousarray(xp[(slice(None), slice(lo, hi)) + _phase_slices(phase, stride, grid)])
            gw[wsel] += _c1_weight_grad(xs, np.ascontiguousarray(g[:, lo:hi]), sub_k)
    return gw


def _pad_spatial(a: np.ndarray, p: int) -> np.ndarray:
    """Zero-pad every spatial axis of a (C, N, *S) array."""
    if p == 0:
        return a
    return np.pad(a, [(0, 0), (0, 0)] + [(p, p)] * (a.ndim - 2))


def _crop_spatial(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return a
    return a[(slice(None), slice(None)) + (slice(p, -p),) * (a.ndim - 2)]


def conv(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0,
         dims: int | None = None) -> Tensor:
    """Cross-correlation of x (N, C, *S) with w (O, C, *K)."""
    d = w.ndim - 2
    if dims is not None and dims != d:
        raise ShapeError(f"conv: weight has {d} spatial dims, expected {dims}")
    if x.ndim != d + 2:
        raise ShapeError(f"conv{d}d expects a {d + 2}-D input, got shape {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    kernel = w.shape[2:]
    out_sp = tuple(conv_out_extent(n, k, stride, pad) for n, k in zip(x.shape[2:], kernel))
    if any(e < 1 for e in out_sp):
        raise ShapeError(f"conv: non-positive output extent {out_sp} for input {x.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError(f"conv: bias shape {bias.shape} does not match {w.shape[0]} outputs")
    xp = _pad_spatial(_to_cn(x.data), pad)
    out = _correlate(xp, w.data, stride, out_sp)
    if bias is not None:
        out += bias.data.reshape((-1,) + (1,) * (out.ndim - 1))
    in_sp = xp.shape[2:]

    def bw(g):
        gc = _to_cn(g)
        if x.requires_grad:
            gx = _crop_spatial(_correlate_adjoint(gc, w.data, stride, in_sp), pad)
            accumulate(x, _from_cn(gx))
        if w.requires_grad:
            accumulate(w, _correlate_weight_grad(xp, gc, stride, kernel))
        if bias is not None and bias.requires_grad:
            accumulate(bias, g.sum(axis=(0,) + tuple(range(2, g.ndim))))

    parents = (x, w) if bias is None else (x, w, bias)
    return make_result(_from_cn(out), parents, bw)


def conv_transpose(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
                   pad: int = 0) -> Tensor:
    """Adjoint of ``conv`` with the same (kernel, stride, pad); w is (C_in, C_out, *K)."""
    d = w.ndim - 2
    if x.ndim != d + 2:
        raise ShapeError(f"conv_transpose{d}d expects a {d + 2}-D input, got shape {x.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose: input has {x.shape[1]} channels, weight expects {w.shape[0]}")
    kernel = w.shape[2:]
    in_sp = x.shape[2:]
    full_sp = tuple((n - 1) * stride + k for n, k in zip(in_sp, kernel))
    out_sp = tuple(conv_transpose_out_extent(n, k, stride, pad) for n, k in zip(in_sp, kernel))
    if any(e < 1 for e in out_sp):
        raise ShapeError(f"conv_transpose: non-positive output extent {out_sp}")
    if bias is not None and bias.shape != (w.shape[1],):
        raise ShapeError(f"conv_transpose: bias shape {bias.shape} does not match {w.shape[1]} outputs")
    xc = _to_cn(x.data)
    out = _crop_spatial(_correlate_adjoint(xc, w.data, stride, full_sp), pad)
    if bias is not None:
        out = out + bias.data.reshape((-1,) + (1,) * (out.ndim - 1))

    def bw(g):
        gfull = _pad_spatial(_to_cn(g), pad)
        if x.requires_grad:
            accumulate(x, _from_cn(_correlate(gfull, w.data, stride, in_sp)))
        if w.requires_grad:
            accumulate(w, _correlate_weight_grad(gfull, xc, stride, kernel))
        if bias is not None and bias.requires_grad:
            accumulate(bias, g.sum(axis=(0,) + tuple(range(2, g.ndim))))

    parents = (x, w) if bias is None else (x, w, bias)
    return make_result(_from_cn(out), parents, bw)


def conv_transpose3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
                     pad: int = 0) -> Tensor:
    if w.ndim != 5:
        raise ShapeError(f"conv_transpose3d needs a 5-D weight, got {w.shape}")
    return conv_transpose(x, w, bias, stride, pad)


def maxpool(x: Tensor, kernel: int, stride: int | None = None, dims: int | None = None) -> Tensor:
    """Max over windows; trailing elements that do not fill a window are dropped.

    Backward routes each window's gradient to its first maximal element.
    """
    d = dims if dims is not None else x.ndim - 2
    s = kernel if stride is None else stride
    sp = x.shape[2:]
    if len(sp) != d:
        raise ShapeError(f"maxpool{d}d got input shape {x.shape}")
    if any(n < kernel for n in sp):
        raise ShapeError(f"maxpool: window {kernel} larger than input extents {sp}")
    out_sp = tuple(pool_out_extent(n, kernel, s) for n in sp)
    lead = x.shape[:2]
    if s == kernel:
        crop = x.data[(slice(None), slice(None)) + tuple(slice(0, o * kernel) for o in out_sp)]
        split = crop.reshape(lead + tuple(v for o in out_sp for v in (o, kernel)))
        order = (0, 1) + tuple(2 + 2 * i for i in range(d)) + tuple(3 + 2 * i for i in range(d))
        win = split.transpose(order).reshape(lead + out_sp + (kernel ** d,))
    else:
        from numpy.lib.stride_tricks import sliding_window_view

        view = sliding_window_view(x.data, (kernel,) * d, axis=tuple(range(2, 2 + d)))
        view = view[(slice(None), slice(None)) + tuple(slice(None, None, s) for _ in range(d))]
        view = view[(slice(None), slice(None)) + tuple(slice(0, o) for o in out_sp)]
        win = view.reshape(lead + out_sp + (kernel ** d,))
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        onehot = np.zeros(lead + out_sp + (kernel ** d,), dtype=g.dtype)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        if s == kernel:
            back = onehot.reshape(lead + out_sp + (kernel,) * d)
            inv = [0, 1]
            for i in range(d):
                inv += [2 + i, 2 + d + i]
            back = back.transpose(inv).reshape(lead + tuple(o * kernel for o in out_sp))
            gx = np.zeros_like(x.data)
            gx[(slice(None), slice(None)) + tuple(slice(0, o * kernel) for o in out_sp)] = back
        else:
            gx = np.zeros_like(x.data)
            offs = np.unravel_index(idx, (kernel,) * d)
            grids = np.indices(out_sp)
            nn, cc = np.indices(lead)
            coords = [nn.reshape(lead + (1,) * d), cc.reshape(lead + (1,) * d)]
            for i in range(d):
                coords.append(grids[i] * s + offs[i])
            np.add.at(gx, tuple(np.broadcast_arrays(*coords)), g)
        accumulate(x, gx)

    return make_result(np.ascontiguousarray(out), (x,), bw)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, eps: float = 1e-5,
              momentum: float = 0.1) -> Tensor:
    """Per-channel normalization over every non-channel axis.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance); in eval mode the buffers are used.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    m = x.size // c
    if training:
        mean = x.data.mean(axis=axes)
        centered = x.data - mean.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        unbiased = var * (m / max(m - 1, 1))
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
        centered = x.data - mean.reshape(bshape)
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * invstd.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        if gamma.requires_grad:
            accumulate(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            accumulate(beta, g.sum(axis=axes))
        if x.requires_grad:
            gh = g * gamma.data.reshape(bshape)
            if training:
                s1 = gh.sum(axis=axes).reshape(bshape)
                s2 = (gh * xhat).sum(axis=axes).reshape(bshape)
                gx = (gh - s1 / m - xhat * (s2 / m)) * invstd.reshape(bshape)
            else:
                gx = gh * invstd.reshape(bshape)
            accumulate(x, gx)

    return make_result(out, (x, gamma, beta), bw)


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully connected layer: x (N, In) times w (Out, In) transposed, plus bias."""
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    if bias is not None:
        out += bias.data

    def bw(g):
        accumulate(x, g @ w.data)
        accumulate(w, g.T @ x.data)
        if bias is not None:
            accumulate(bias, g.sum(axis=0))

    parents = (x, w) if bias is None else (x, w, bias)
    return make_result(out, parents, bw)
