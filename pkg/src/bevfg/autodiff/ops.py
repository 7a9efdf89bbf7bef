"""Differentiable operators.

Every function takes ``Tensor`` (or array-like) inputs and returns a
``Tensor`` whose node carries the exact adjoint. Broadcasting follows numpy.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import DomainError, ShapeMismatch
from .tensor import Tensor, as_tensor, make_node


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise DomainError(f"{op} produced a non-finite value")
    return data


# ----------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_node(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_node(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_node(ad * bd, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("division by zero")
    out = ad / bd

    def grad_fn(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return make_node(out, (a, b), grad_fn, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = _check_finite(np.exp(a.data), "exp")
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    ad = a.data
    return make_node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    s = np.sign(a.data)
    return make_node(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return make_node(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return make_node(out, (a,), lambda g: (g * _sigmoid(ad),), "softplus")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def pow(a, p: float) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    p = float(p)
    ad = a.data
    if p != int(p) and np.any(ad < 0):
        raise DomainError("fractional power of a negative value")
    if p < 1 and p != 0 and np.any(ad == 0):
        raise DomainError("power with exponent < 1 at zero has no finite derivative")
    out = ad**p
    return make_node(out, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb))

    return make_node(np.where(cond, a.data, b.data), (a, b), grad_fn, "where")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return make_node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ----------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(a.data.sum(axis=axes, keepdims=keepdims), (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum(a, axis, keepdims), 1.0 / n)


def min_over_axis(a, axis: int) -> Tensor:
    """Minimum along ``axis``; the adjoint goes to the first minimizer."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.expand_dims(np.argmin(a.data, axis=axis), axis)
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis)
        return (out,)

    return make_node(np.take_along_axis(a.data, idx, axis).squeeze(axis), (a,), grad_fn, "min")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return make_node(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return make_node(out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),), "log_softmax")


def cumprod_exclusive(a) -> Tensor:
    """Exclusive cumulative product along the last axis: out_i = prod_{j<i} a_j.

    The adjoint is evaluated by a reverse linear scan, so it stays exact
    when some factors are zero.
    """
    a = as_tensor(a)
    x = a.data
    out = np.ones_like(x)
    if x.shape[-1] > 1:
        out[..., 1:] = np.cumprod(x[..., :-1], axis=-1)

    def grad_fn(g):
        k = x.shape[-1]
        s = np.zeros(x.shape[:-1])
        gx = np.zeros_like(x)
        for j in range(k - 2, -1, -1):
            s = g[..., j + 1] + x[..., j + 1] * s
            gx[..., j] = out[..., j] * s
        return (gx,)

    return make_node(out, (a,), grad_fn, "cumprod_exclusive")


# ----------------------------------------------------------------------
# shape and indexing


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return make_node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic_index(idx)

    def grad_fn(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return make_node(a.data[idx], (a,), grad_fn, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return make_node(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    n = len(ts)
    return make_node(
        np.stack([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
        "stack",
    )


def gather(a, index, axis: int = 0) -> Tensor:
    """``np.take(a, index, axis)``; the adjoint scatter-adds back."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape
    axis = axis % a.ndim

    def grad_fn(g):
        out = np.zeros(shape)
        gm = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
        np.add.at(np.moveaxis(out, axis, 0), index, gm)
        return (out,)

    return make_node(np.take(a.data, index, axis=axis), (a,), grad_fn, "gather")


def scatter_add(src, index, dim_size: int, axis: int = 0) -> Tensor:
    """Sum slices of ``src`` along ``axis`` into ``dim_size`` bins given by ``index``."""
    src = as_tensor(src)
    index = np.asarray(index, dtype=np.int64)
    axis = axis % src.ndim
    if index.shape != (src.shape[axis],):
        raise ShapeMismatch("scatter_add index must match src along axis")
    shape = list(src.shape)
    shape[axis] = dim_size
    out = np.zeros(shape)
    np.add.at(np.moveaxis(out, axis, 0), index, np.moveaxis(src.data, axis, 0))
    return make_node(out, (src,), lambda g: (np.take(g, index, axis=axis),), "scatter_add")


# ----------------------------------------------------------------------
# linear algebra and sampling


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return make_node(ad @ bd, (a, b), grad_fn, "matmul")


def bilinear_sample(img, coords) -> tuple[Tensor, np.ndarray]:
    """Sample ``img`` (C x H x W) at continuous pixel ``coords`` (N x 2, as u, v).

    Pixel (i, j) is centred on integer coordinate (i, j); taps outside the
    image contribute zero. Returns the N x C samples and a validity flag
    that is false when the point lies outside (-1, W) x (-1, H).
    """
    img, coords = as_tensor(img), as_tensor(coords)
    if img.ndim != 3 or coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeMismatch(f"bilinear_sample got img {img.shape}, coords {coords.shape}")
    C, H, W = img.shape
    x = coords.data[:, 0]
    y = coords.data[:, 1]
    valid = (x > -1) & (x < W) & (y > -1) & (y < H)
    xs = np.where(valid, x, -5.0)
    ys = np.where(valid, y, -5.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    wx = xs - x0
    wy = ys - y0
    flat = img.data.reshape(C, H * W)

    taps = []
    for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        inb = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        lin = np.where(inb, yi * W + xi, 0)
        val = np.where(inb, flat[:, lin], 0.0).T  # N x C
        taps.append((lin, inb, val))
    (la, ia, va), (lb, ib, vb), (lc, ic, vc), (ld, id_, vd) = taps
    w = [
        (1 - wx) * (1 - wy),
        wx * (1 - wy),
        (1 - wx) * wy,
        wx * wy,
    ]
    out = w[0][:, None] * va + w[1][:, None] * vb + w[2][:, None] * vc + w[3][:, None] * vd
    out[~valid] = 0.0
    N = len(x)

    def grad_fn(g):
        g = np.where(valid[:, None], g, 0.0)
        gimg = None
        if img.requires_grad:
            chan = (np.arange(C) * (H * W))[None, :]
            idx = np.concatenate([(l[:, None] + chan).ravel() for l, _, _ in taps])
            wts = np.concatenate([((wk * inb)[:, None] * g).ravel() for wk, (_, inb, _) in zip(w, taps)])
            gimg = np.bincount(idx, weights=wts, minlength=C * H * W).reshape(C, H, W)
        gco = None
        if coords.requires_grad:
            gx = ((1 - wy)[:, None] * (vb - va) + wy[:, None] * (vd - vc)) * g
            gy = ((1 - wx)[:, None] * (vc - va) + wx[:, None] * (vd - vb)) * g
            gco = np.stack([gx.sum(axis=1), gy.sum(axis=1)], axis=1)
        return gimg, gco

    assert out.shape == (N, C)
    return make_node(out, (img, coords), grad_fn, "bilinear_sample"), valid


def trilinear_sample(grid, points: np.ndarray) -> Tensor:
    """Sample ``grid`` (C x X x Y x Z) at fractional lattice ``points`` (N x 3).

    Lattice index i is the centre of cell i; corners outside the lattice
    contribute zero. Gradients flow to ``grid`` only.
    """
    grid = as_tensor(grid)
    points = np.asarray(points, dtype=np.float64)
    if grid.ndim != 4 or points.ndim != 2 or points.shape[1] != 3:
        raise ShapeMismatch(f"trilinear_sample got grid {grid.shape}, points {points.shape}")
    C, X, Y, Z = grid.shape
    N = len(points)
    inside = np.all((points > -1) & (points < np.array([X, Y, Z])), axis=1)
    sel = np.flatnonzero(inside)
    p = points[sel]
    p0 = np.floor(p).astype(np.int64)
    f = p - p0
    rows = grid.data.reshape(C, -1).T  # V x C, contiguous rows
    V = rows.shape[0]
    lins, wgts = [], []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                i, j, k = p0[:, 0] + dx, p0[:, 1] + dy, p0[:, 2] + dz
                inb = (i >= 0) & (i < X) & (j >= 0) & (j < Y) & (k >= 0) & (k < Z)
                wgt = (
                    (f[:, 0] if dx else 1 - f[:, 0])
                    * (f[:, 1] if dy else 1 - f[:, 1])
                    * (f[:, 2] if dz else 1 - f[:, 2])
                )
                wgts.append(np.where(inb, wgt, 0.0))
                lins.append(np.where(inb, (i * Y + j) * Z + k, 0))
    acc = np.zeros((len(sel), C))
    for lin, wgt in zip(lins, wgts):
        acc += rows[lin] * wgt[:, None]
    out = np.zeros((N, C))
    out[sel] = acc
    lin_all = np.concatenate(lins)
    wgt_all = np.stack(wgts)  # 8 x M

    def grad_fn(g):
        gs = g[sel]
        grows = np.empty((C, V))
        for c in range(C):
            grows[c] = np.bincount(lin_all, weights=(wgt_all * gs[:, c]).ravel(), minlength=V)
        return (grows.reshape(C, X, Y, Z),)

    return make_node(out, (grid,), grad_fn, "trilinear_sample")


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of a single C x H x W image with O x C x k x k filters."""
    x, w = as_tensor(x), as_tensor(w)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        parents.append(b)
    C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeMismatch(f"conv2d channels: input {C}, filter {Cw}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    Hp, Wp = xp.shape[1:]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(C * kh * kw, Ho * Wo)
    wm = w.data.reshape(O, -1)
    out = wm @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(O, Ho, Wo)

    def grad_fn(g):
        g2 = g.reshape(O, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if b is not None else None
        gx = None
        if x.requires_grad:
            gcols = (wm.T @ g2).reshape(C, kh, kw, Ho, Wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, i, j]
            gx = gxp[:, padding : padding + H, padding : padding + W]
        grads = [gx, gw]
        if b is not None:
            grads.append(gb)
        return grads

    return make_node(out, parents, grad_fn, "conv2d")


def avg_pool2(x) -> Tensor:
    """2x2 average pooling with stride 2; odd edges are zero padded."""
    x = as_tensor(x)
    C, H, W = x.shape
    Ho, Wo = -(-H // 2), -(-W // 2)
    xp = np.zeros((C, 2 * Ho, 2 * Wo))
    xp[:, :H, :W] = x.data
    out = xp.reshape(C, Ho, 2, Wo, 2).mean(axis=(2, 4))

    def grad_fn(g):
        up = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0
        return (up[:, :H, :W],)

    return make_node(out, (x,), grad_fn, "avg_pool2")
