"""Differentiable operations on :class:`Tensor` values.

Layout is row-major B,C,H,W for every 4-D tensor.  Each op computes its forward
result with numpy and registers a closure mapping the output gradient to one
gradient per input (``None`` for inputs that take no gradient).
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf

from .tensor import Tensor, as_tensor, make_result


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """Op hyperparameters cannot produce a valid output."""


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b):
    ta = as_tensor(a, b if isinstance(b, Tensor) else None)
    tb = as_tensor(b, ta)
    return ta, tb


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} and {b.shape}") from exc
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} and {b.shape}") from exc
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data / b.data
    except ValueError as exc:
        raise ShapeError(f"div: cannot broadcast {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return make_result(-x.data, (x,), lambda g: (-g,))


def power(x: Tensor, exponent: float) -> Tensor:
    out = x.data ** exponent
    return make_result(out, (x,), lambda g: (g * exponent * x.data ** (exponent - 1),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input was inside [lo, hi]."""
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return make_result(out, (x,), lambda g: (g * inside,))


# --- activations ------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d * _SQRT1_2))
    out = (d * cdf).astype(d.dtype, copy=False)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * d * d)
        return ((g * (cdf + d * pdf)).astype(d.dtype, copy=False),)

    return make_result(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


# --- reductions and shape ---------------------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return make_result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape),)

    return make_result(np.asarray(out, dtype=x.dtype), (x,), backward)


def amax(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    axis = axis % x.ndim
    idx = np.expand_dims(x.data.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=axis)
        return (gx,)

    return make_result(out if keepdims else np.squeeze(out, axis), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return make_result(np.array(out), (x,), backward)


def slice_axis(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    """Contiguous slice ``[start:stop]`` along one axis."""
    axis = axis % x.ndim
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return make_result(x.data[sl], (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = list(xs)
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def backward(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return parts

    return make_result(out, tuple(xs), backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    for t in xs:
        if t.ndim != 4:
            raise ShapeError(f"concat_channels expects 4-D tensors, got {t.shape}")
    return concat(xs, axis=1)


def take(x: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    axis = axis % x.ndim
    index = np.asarray(index, dtype=np.intp)
    out = np.take(x.data, index, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        np.add.at(gx, tuple(sl), g)
        return (gx,)

    return make_result(out, (x,), backward)


def pad2d(x: Tensor, pads: tuple[int, int, int, int], mode: str = "constant") -> Tensor:
    """Pad the last two axes by (top, bottom, left, right); mode ``constant`` or ``edge``."""
    top, bottom, left, right = pads
    if mode == "constant":
        out = np.pad(x.data, ((0, 0),) * (x.ndim - 2) + ((top, bottom), (left, right)))
        h, w = x.shape[-2:]
        return make_result(out, (x,), lambda g: (g[..., top:top + h, left:left + w],))
    if mode == "edge":
        h, w = x.shape[-2:]
        rows = np.clip(np.arange(-top, h + bottom), 0, h - 1)
        cols = np.clip(np.arange(-left, w + right), 0, w - 1)
        return take(take(x, rows, -2), cols, -1)
    raise ConfigurationError(f"unknown pad mode {mode!r}")


# --- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_result(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise ShapeError(f"linear: input last dim {x.shape[-1]} != weight in-dim {d_in}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (d_out,))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out, inputs, backward)


# --- convolution ------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise ConfigurationError(
            f"kernel {kernel} larger than padded input {size + 2 * padding}")
    return span // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, (b, c, kh, kw, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride),
                      writeable=False)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    Output extent is ``(H + 2p - k) // stride + 1``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    b, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if cin != cin_g * groups or cout % groups:
        raise ShapeError(f"conv2d: input channels {cin} vs weight {weight.shape} (groups={groups})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    xp = np.ascontiguousarray(xp)
    win = _windows(xp, kh, kw, stride, ho, wo)
    wd = weight.data
    cout_g = cout // groups

    if groups == 1:
        cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(b * ho * wo, cin * kh * kw)
        out = (cols @ wd.reshape(cout, -1).T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    elif cin_g == 1 and cout_g == 1:
        out = np.einsum("bcijhw,cij->bchw", win, wd[:, 0])
    else:
        outs = []
        for gi in range(groups):
            wg = win[:, gi * cin_g:(gi + 1) * cin_g]
            colg = wg.transpose(0, 4, 5, 1, 2, 3).reshape(b * ho * wo, -1)
            wgt = wd[gi * cout_g:(gi + 1) * cout_g].reshape(cout_g, -1)
            outs.append((colg @ wgt.T).reshape(b, ho, wo, cout_g))
        out = np.concatenate(outs, axis=3).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = gw = None
        if groups == 1:
            gmat = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
            if weight.requires_grad:
                gw = (gmat.T @ cols).reshape(wd.shape)
            if x.requires_grad:
                gcols = (gmat @ wd.reshape(cout, -1)).reshape(b, ho, wo, cin, kh, kw)
                gcols = gcols.transpose(0, 3, 4, 5, 1, 2)
        elif cin_g == 1 and cout_g == 1:
            if weight.requires_grad:
                gw = np.einsum("bcijhw,bchw->cij", win, g)[:, None]
            if x.requires_grad:
                gcols = np.einsum("cij,bchw->bcijhw", wd[:, 0], g)
        else:
            gws, gcs = [], []
            for gi in range(groups):
                gg = g[:, gi * cout_g:(gi + 1) * cout_g]
                gmat = gg.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout_g)
                wg = win[:, gi * cin_g:(gi + 1) * cin_g]
                colg = wg.transpose(0, 4, 5, 1, 2, 3).reshape(b * ho * wo, -1)
                wgt = wd[gi * cout_g:(gi + 1) * cout_g].reshape(cout_g, -1)
                gws.append((gmat.T @ colg).reshape(cout_g, cin_g, kh, kw))
                gcs.append((gmat @ wgt).reshape(b, ho, wo, cin_g, kh, kw))
            gw = np.concatenate(gws, axis=0) if weight.requires_grad else None
            gcols = np.concatenate(gcs, axis=3).transpose(0, 3, 4, 5, 1, 2)
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, inputs, backward)


# --- pooling ----------------------------------------------------------------

def avg_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    stride = stride or kernel
    b, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride, 0)
    wo = conv_output_size(w, kernel, stride, 0)
    xd = np.ascontiguousarray(x.data)
    win = _windows(xd, kernel, kernel, stride, ho, wo)
    out = win.mean(axis=(2, 3))

    def backward(g):
        gx = np.zeros_like(xd)
        share = g / (kernel * kernel)
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += share
        return (gx,)

    return make_result(out, (x,), backward)


def max_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    """Max pooling; gradient goes only to the (first) argmax of each window."""
    stride = stride or kernel
    b, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride, 0)
    wo = conv_output_size(w, kernel, stride, 0)
    xd = np.ascontiguousarray(x.data)
    win = _windows(xd, kernel, kernel, stride, ho, wo)
    flat = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(xd)
        di, dj = np.divmod(arg, kernel)
        rows = np.arange(ho)[:, None] * stride + di
        cols = np.arange(wo)[None, :] * stride + dj
        bi = np.arange(b)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gx, (bi, ci, rows, cols), g)
        return (gx,)

    return make_result(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3), keepdims=True)


# --- normalisation ----------------------------------------------------------

def _normalize(x: np.ndarray, axes: tuple[int, ...], eps: float):
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def _normalize_backward(g: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axes) -> np.ndarray:
    gm = g.mean(axis=axes, keepdims=True)
    gxm = (g * xhat).mean(axis=axes, keepdims=True)
    return inv * (g - gm - xhat * gxm)


def layer_norm(x: Tensor, gain: Optional[Tensor] = None, shift: Optional[Tensor] = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and shift."""
    xhat, inv = _normalize(x.data, (-1,), eps)
    out = xhat
    if gain is not None:
        out = out * gain.data
    if shift is not None:
        out = out + shift.data
    inputs = tuple(t for t in (x, gain, shift) if t is not None)
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gh = g * gain.data if gain is not None else g
        grads = [_normalize_backward(gh, xhat, inv, (-1,)) if x.requires_grad else None]
        if gain is not None:
            grads.append((g * xhat).sum(axis=lead))
        if shift is not None:
            grads.append(g.sum(axis=lead))
        return grads

    return make_result(out.astype(x.dtype, copy=False), inputs, backward)


def group_norm(x: Tensor, groups: int, gain: Optional[Tensor] = None,
               shift: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    """Per-sample normalisation over (channels-in-group, H, W); affine per channel."""
    b, c, h, w = x.shape
    if c % groups:
        raise ConfigurationError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(b, groups, c // groups, h, w)
    axes = (2, 3, 4)
    xhat_g, inv = _normalize(xg, axes, eps)
    xhat = xhat_g.reshape(b, c, h, w)
    out = xhat
    if gain is not None:
        out = out * gain.data[None, :, None, None]
    if shift is not None:
        out = out + shift.data[None, :, None, None]
    inputs = tuple(t for t in (x, gain, shift) if t is not None)

    def backward(g):
        gh = g * gain.data[None, :, None, None] if gain is not None else g
        gx = None
        if x.requires_grad:
            gx = _normalize_backward(gh.reshape(xg.shape), xhat_g, inv, axes).reshape(x.shape)
        grads = [gx]
        if gain is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3)))
        if shift is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result(out.astype(x.dtype, copy=False), inputs, backward)


# --- resampling -------------------------------------------------------------

def _linear_weights(out_size: int, in_size: int, dtype) -> np.ndarray:
    """Interpolation matrix [out, in] for align_corners=False bilinear resizing."""
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(np.intp), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    lam = src - i0
    m = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with the half-pixel (align_corners=False) convention."""
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"bilinear_resize: invalid target {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return make_result(x.data.copy(), (x,), lambda g: (g,))
    rh = _linear_weights(out_h, h, x.dtype)
    rw = _linear_weights(out_w, w, x.dtype)
    out = np.matmul(np.matmul(rh, x.data), rw.T)
    return make_result(out, (x,), lambda g: (np.matmul(np.matmul(rh.T, g), rw),))


def upsample_like(x: Tensor, ref: Tensor) -> Tensor:
    return bilinear_resize(x, ref.shape[-2], ref.shape[-1])


def grid_sample(x: Tensor, flow: Tensor) -> Tensor:
    """Bilinear sampling of ``x`` at (identity grid + flow), in pixel units.

    ``flow[:, 0]`` is the x (column) offset and ``flow[:, 1]`` the y (row) offset.
    Sample coordinates are clamped to the image border.
    """
    b, c, h, w = x.shape
    if flow.shape != (b, 2, h, w):
        raise ShapeError(f"grid_sample: flow shape {flow.shape} != {(b, 2, h, w)}")
    xd = x.data
    dt = xd.dtype
    gy, gx = np.meshgrid(np.arange(h, dtype=dt), np.arange(w, dtype=dt), indexing="ij")
    px_raw = gx[None] + flow.data[:, 0]
    py_raw = gy[None] + flow.data[:, 1]
    px = np.clip(px_raw, 0, w - 1)
    py = np.clip(py_raw, 0, h - 1)
    in_x = (px_raw >= 0) & (px_raw <= w - 1)
    in_y = (py_raw >= 0) & (py_raw <= h - 1)
    x0 = np.floor(px).astype(np.intp)
    y0 = np.floor(py).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (px - x0).astype(dt)
    wy = (py - y0).astype(dt)
    bi = np.arange(b)[:, None, None]
    # gathered corners: [B,H,W,C]
    v00 = xd[bi, :, y0, x0]
    v01 = xd[bi, :, y0, x1]
    v10 = xd[bi, :, y1, x0]
    v11 = xd[bi, :, y1, x1]
    w00 = ((1 - wx) * (1 - wy))[..., None]
    w01 = (wx * (1 - wy))[..., None]
    w10 = ((1 - wx) * wy)[..., None]
    w11 = (wx * wy)[..., None]
    out = (v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        gt = g.transpose(0, 2, 3, 1)
        gxin = gflow = None
        if x.requires_grad:
            acc = np.zeros((b, h, w, c), dtype=dt)
            for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
                np.add.at(acc, (bi, yy, xx), gt * ww)
            gxin = acc.transpose(0, 3, 1, 2)
        if flow.requires_grad:
            dwx = ((v01 - v00) * (1 - wy)[..., None] + (v11 - v10) * wy[..., None])
            dwy = ((v10 - v00) * (1 - wx)[..., None] + (v11 - v01) * wx[..., None])
            gfx = (gt * dwx).sum(axis=-1) * in_x
            gfy = (gt * dwy).sum(axis=-1) * in_y
            gflow = np.stack([gfx, gfy], axis=1).astype(dt, copy=False)
        return gxin, gflow

    return make_result(out, (x, flow), backward)
