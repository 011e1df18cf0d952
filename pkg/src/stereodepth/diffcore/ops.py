"""Differentiable operations over :class:`Tensor`.

Shapes must match exactly; there is no implicit broadcasting. Python scalars
are accepted where noted and treated as constants.
"""
from __future__ import annotations

from numbers import Real

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_result


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Real):
        return make_result(a.data + float(b), (a,), lambda g: (g,), "add_scalar")
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Real):
        return make_result(a.data - float(b), (a,), lambda g: (g,), "sub_scalar")
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Real):
        c = float(b)
        return make_result(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, Real):
        c = float(b)
        return make_result(a.data / c, (a,), lambda g: (g / c,), "div_scalar")
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    # sign(0) == 0 gives the symmetric subgradient at the kink
    sign = np.sign(a.data)
    return make_result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise ValueError("log: non-positive input")
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clamp_min(a: Tensor, low: float = 0.0) -> Tensor:
    """max(a, low); gradient passes only where a > low."""
    keep = a.data > low
    return make_result(np.where(keep, a.data, low), (a,), lambda g: (g * keep,), "clamp_min")


def elu(x: Tensor) -> Tensor:
    pos = x.data > 0
    neg_part = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(pos, x.data, neg_part)
    return make_result(out, (x,), lambda g: (g * np.where(pos, 1.0, neg_part + 1.0),), "elu")


def sigmoid_scaled(x: Tensor, d_max) -> Tensor:
    """``d_max * sigmoid(x)``; d_max may be a scalar or an array matching x."""
    d_max = np.asarray(d_max, dtype=np.float64)
    if (d_max <= 0).any():
        raise ValueError("sigmoid_scaled: d_max must be positive")
    # split by sign so exp never overflows
    xd = x.data
    e = np.exp(-np.abs(xd))
    sig = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = d_max * sig
    return make_result(out, (x,), lambda g: (g * d_max * sig * (1.0 - sig),), "sigmoid_scaled")


# ---------------------------------------------------------------- reductions

def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape = a.shape
    return make_result(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return make_result(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def channel_mean(a: Tensor) -> Tensor:
    """Mean over the channel axis (-3): ``[N x] C x H x W -> [N x] H x W``."""
    if a.ndim < 3:
        raise ShapeError(f"channel_mean needs a channel axis, got {a.shape}")
    c = a.shape[-3]
    return make_result(
        a.data.mean(axis=-3),
        (a,),
        lambda g: (np.repeat(np.expand_dims(g / c, -3), c, axis=-3),),
        "channel_mean",
    )


def masked_mean(a: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``a`` over the entries where ``mask`` is true."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_mean: mask {mask.shape} vs tensor {a.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ShapeError("masked_mean: empty mask")
    weight = mask / n
    return make_result(np.array((a.data * weight).sum()), (a,), lambda g: (float(g) * weight,), "masked_mean")


# ---------------------------------------------------------------- structure

def getitem(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing only, so no element is selected twice."""
    keys = key if isinstance(key, tuple) else (key,)
    for k in keys:
        if not (isinstance(k, (int, slice, np.integer)) or k is Ellipsis or k is None):
            raise TypeError(f"getitem: only basic indexing is supported, got {type(k).__name__}")
    shape = a.shape
    out = a.data[key]

    def backward(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return make_result(np.array(out), (a,), backward, "getitem")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_result(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),), "reshape")


def concat_channels(tensors) -> Tensor:
    """Concatenate along the channel axis (third from last)."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_channels: nothing to concatenate")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.ndim < 3 or t.shape[:-3] != ref[:-3] or t.shape[-2:] != ref[-2:]:
            raise ShapeError(f"concat_channels: {t.shape} incompatible with {ref}")
    sizes = [t.shape[-3] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=-3)

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1], :, :] for i in range(len(tensors)))

    return make_result(out, tensors, backward, "concat_channels")


def stack(tensors) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    tensors = list(tensors)
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "stack")
    out = np.stack([t.data for t in tensors])
    return make_result(out, tensors, lambda g: tuple(g[i] for i in range(len(tensors))), "stack")


def flip_horizontal(a: Tensor) -> Tensor:
    return make_result(a.data[..., ::-1].copy(), (a,), lambda g: (g[..., ::-1],), "flip_horizontal")


# ---------------------------------------------------------------- spatial

def _as_batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1} or {ndim} dims, got shape {x.shape}")
    return x, False


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding.

    ``x`` is ``C x H x W`` or ``N x C x H x W``; ``weight`` is ``O x C x k x k``;
    ``bias`` has shape ``(O,)``.
    """
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride {stride} / padding {padding} out of range")
    xb, squeeze = _as_batched(x.data, 4)
    w = weight.data
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: weight must be O x C x k x k, got {w.shape}")
    o, c, k, _ = w.shape
    if xb.shape[1] != c:
        raise ShapeError(f"conv2d: input channels {xb.shape[1]} != weight in_channels {c}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    n, _, h, wd = xb.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h}x{wd}")
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # cols: n, c, ho, wo, k, k
    cols = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    wmat = w.reshape(o, c * k * k)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        gb = g[None] if squeeze else g
        gmat = gb.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        grad_w = (gmat.T @ cols).reshape(w.shape)
        grad_b = gmat.sum(axis=0)
        gcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        if squeeze:
            gx = gx[0]
        return (np.ascontiguousarray(gx), grad_w, grad_b)

    return make_result(out[0] if squeeze else out, (x, weight, bias), backward, "conv2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError(f"upsample_nearest2x: need at least 2 dims, got {x.shape}")
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    shape = x.shape

    def backward(g):
        return (g.reshape(*shape[:-2], shape[-2], 2, shape[-1], 2).sum(axis=(-3, -1)),)

    return make_result(out, (x,), backward, "upsample_nearest2x")


def avgpool2x(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 mean over the last two axes."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x: spatial dims must be even, got {h}x{w}")
    lead = x.shape[:-2]
    out = x.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def backward(g):
        return (0.25 * g.repeat(2, axis=-2).repeat(2, axis=-1),)

    return make_result(out, (x,), backward, "avgpool2x")


def box_filter3(x: Tensor) -> Tensor:
    """Mean over every 3x3 window lying fully inside the image (valid mode)."""
    h, w = x.shape[-2:]
    if h < 3 or w < 3:
        raise ShapeError(f"box_filter3: image {h}x{w} smaller than 3x3")
    d = x.data
    out = np.zeros(d.shape[:-2] + (h - 2, w - 2))
    for i in range(3):
        for j in range(3):
            out += d[..., i : i + h - 2, j : j + w - 2]
    out /= 9.0
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        g9 = g / 9.0
        for i in range(3):
            for j in range(3):
                gx[..., i : i + h - 2, j : j + w - 2] += g9
        return (gx,)

    return make_result(out, (x,), backward, "box_filter3")
