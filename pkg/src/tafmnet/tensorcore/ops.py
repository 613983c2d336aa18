"""Differentiable operations on channels-last tensors.

Image ops accept ``h x w x c`` tensors or a batch ``n x h x w x c``; the
batch axis is only a leading loop dimension and never mixes samples, except
in :func:`batch_norm2d` where batch moments are pooled by definition.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import special

from ..exceptions import InvalidAxis, InvalidRate, ShapeMismatch
from . import _kernels
from .tensor import Tensor, as_tensor, make_result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise InvalidAxis(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_result(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return make_result(out, (a, b), bw)


def power(x: Tensor, exponent: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return make_result(xd**exponent, (x,), lambda g: (g * exponent * xd ** (exponent - 1),))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is passed only where no clamping happened."""
    x = as_tensor(x)
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return make_result(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return make_result(x.data * pos, (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = special.expit(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd * _INV_SQRT2))
    out = xd * cdf

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return make_result(out, (x,), bw)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "gelu": gelu}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


# ------------------------------------------------------------------ reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_result(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ------------------------------------------------------------------ structure


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = np.argsort(axes)
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    """Swap the two trailing axes (matrix transpose over any leading batch)."""
    return make_result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make_result(np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, old),))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel (last) axis in argument order."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeMismatch("nothing to concatenate")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeMismatch(f"spatial extents differ: {p.shape[:-1]} vs {lead}")
    if len(parts) == 1:
        return parts[0]
    splits = np.cumsum([p.shape[-1] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=-1)
    return make_result(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=-1)))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``start:stop`` of the last axis."""
    x = as_tensor(x)
    shape, dtype = x.shape, x.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[..., start:stop] = g
        return (full,)

    return make_result(x.data[..., start:stop], (x,), bw)


# -------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), bw)


def pointwise(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution: mixes channels with a ``c_in x c_out`` matrix."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim == 4:
        if weight.shape[:2] != (1, 1):
            raise ShapeMismatch("pointwise kernel must be 1x1")
        weight = reshape(weight, weight.shape[2:])
    if x.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(f"channel mismatch: input {x.shape[-1]}, kernel {weight.shape[0]}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_result(out, parents, bw)


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeMismatch(f"expected h x w x c or n x h x w x c, got {x.shape}")
    return x, False


def _unbatch(y: Tensor, squeezed: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeezed else y


def _padding(kh: int, kw: int, padding: str) -> tuple[int, int]:
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeMismatch("same padding needs odd kernel extents")
        return kh // 2, kw // 2
    if padding == "valid":
        return 0, 0
    raise ValueError(f"unknown padding {padding!r}")


def conv2d(x: Tensor, kernel: Tensor, padding: str = "same", stride: int = 1,
           bias: Tensor | None = None) -> Tensor:
    """Dense 2-D cross-correlation with zero padding.

    ``kernel`` has shape ``kh x kw x c_in x c_out``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4:
        raise ShapeMismatch(f"kernel must be kh x kw x c_in x c_out, got {kernel.shape}")
    kh, kw, ci, co = kernel.shape
    if x.shape[-1] != ci:
        raise ShapeMismatch(f"channel mismatch: input {x.shape[-1]}, kernel {ci}")
    if kh == kw == 1 and stride == 1:
        return pointwise(x, kernel, bias)
    xb, squeezed = _as_batch(x)
    ph, pw = _padding(kh, kw, padding)
    xd, kd = xb.data, kernel.data
    n, h, w, _ = xd.shape
    xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else xd
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch("kernel larger than padded input")

    def window(i, j):
        return (slice(None), slice(i, i + stride * (ho - 1) + 1, stride),
                slice(j, j + stride * (wo - 1) + 1, stride), slice(None))

    out = np.zeros((n, ho, wo, co), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[window(i, j)] @ kd[i, j]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
    parents = (xb, kernel) if bias is None else (xb, kernel, bias)

    def bw(g):
        gk = np.empty_like(kd) if kernel.requires_grad else None
        gxp = np.zeros_like(xp) if xb.requires_grad else None
        g2 = g.reshape(-1, co)
        for i in range(kh):
            for j in range(kw):
                win = window(i, j)
                if gk is not None:
                    gk[i, j] = xp[win].reshape(-1, ci).T @ g2
                if gxp is not None:
                    gxp[win] += g @ kd[i, j].T
        gx = None
        if gxp is not None:
            gx = gxp[:, ph:ph + h, pw:pw + w, :] if (ph or pw) else gxp
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0) if bias.requires_grad else None

    return _unbatch(make_result(out, parents, bw), squeezed)


def _depthwise_numpy(xp, kd, ho, wo):
    n, c = xp.shape[0], xp.shape[-1]
    kh, kw, _ = kd.shape
    out = np.zeros((n, ho, wo, c), dtype=xp.dtype)
    tmp = np.empty_like(out)
    for i in range(kh):
        for j in range(kw):
            np.multiply(xp[:, i:i + ho, j:j + wo, :], kd[i, j], out=tmp)
            out += tmp
    return out


def _depthwise_numpy_backward(xp, kd, g, want_x, want_k):
    kh, kw, _ = kd.shape
    ho, wo = g.shape[1:3]
    gk = np.empty_like(kd) if want_k else None
    gxp = np.zeros_like(xp) if want_x else None
    buf = np.empty_like(g)
    for i in range(kh):
        for j in range(kw):
            win = xp[:, i:i + ho, j:j + wo, :]
            if gk is not None:
                gk[i, j] = np.einsum("nhwc,nhwc->c", win, g)
            if gxp is not None:
                np.multiply(g, kd[i, j], out=buf)
                gxp[:, i:i + ho, j:j + wo, :] += buf
    return gxp, gk


use_compiled_kernels = _kernels.HAVE_NUMBA


def depthwise_conv2d(x: Tensor, kernel: Tensor, padding: str = "same") -> Tensor:
    """Per-channel spatial cross-correlation; ``kernel`` is ``kh x kw x c``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 3:
        raise ShapeMismatch(f"depthwise kernel must be kh x kw x c, got {kernel.shape}")
    kh, kw, c = kernel.shape
    if x.shape[-1] != c:
        raise ShapeMismatch(f"depthwise kernel has {c} filters for {x.shape[-1]} channels")
    xb, squeezed = _as_batch(x)
    ph, pw = _padding(kh, kw, padding)
    xd = xb.data
    kd = np.ascontiguousarray(kernel.data, dtype=xd.dtype)
    n, h, w, _ = xd.shape
    xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else np.ascontiguousarray(xd)
    ho, wo = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch("kernel larger than padded input")
    compiled = use_compiled_kernels
    if compiled:
        out = np.zeros((n, ho, wo, c), dtype=xd.dtype)
        _kernels.depthwise_forward(xp, kd, out)
    else:
        out = _depthwise_numpy(xp, kd, ho, wo)

    def bw(g):
        g = np.ascontiguousarray(g, dtype=xd.dtype)
        if compiled:
            gxp = gk = None
            if xb.requires_grad:
                gxp = np.zeros_like(xp)
                _kernels.depthwise_backward_input(g, kd, gxp)
            if kernel.requires_grad:
                gk = np.zeros_like(kd)
                _kernels.depthwise_backward_kernel(xp, g, gk)
        else:
            gxp, gk = _depthwise_numpy_backward(xp, kd, g, xb.requires_grad, kernel.requires_grad)
        gx = None
        if gxp is not None:
            gx = gxp[:, ph:ph + h, pw:pw + w, :] if (ph or pw) else gxp
        return gx, gk

    return _unbatch(make_result(out, (xb, kernel), bw), squeezed)


def depthwise_separable_conv2d(x: Tensor, depth_kernel: Tensor, point_kernel: Tensor,
                               bias: Tensor | None = None, padding: str = "same") -> Tensor:
    """Depthwise spatial filtering followed by 1x1 pointwise channel mixing."""
    return pointwise(depthwise_conv2d(x, depth_kernel, padding), point_kernel, bias)


# ---------------------------------------------------------------- resampling


def _upsample_axis(a: np.ndarray, axis: int) -> np.ndarray:
    n = a.shape[axis]
    a_m = np.moveaxis(a, axis, 0)
    prev = np.concatenate([a_m[:1], a_m[:-1]], axis=0)
    nxt = np.concatenate([a_m[1:], a_m[-1:]], axis=0)
    even = 0.75 * a_m + 0.25 * prev
    odd = 0.75 * a_m + 0.25 * nxt
    out = np.stack([even, odd], axis=1).reshape((2 * n,) + a_m.shape[1:])
    return np.moveaxis(out, 0, axis)


def _upsample_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g_m = np.moveaxis(g, axis, 0)
    n = g_m.shape[0] // 2
    pair = g_m.reshape((n, 2) + g_m.shape[1:])
    ge, go = pair[:, 0], pair[:, 1]
    dx = 0.75 * (ge + go)
    # even output i pulls from i-1 (clamped), odd output i pulls from i+1 (clamped)
    dx[:-1] += 0.25 * ge[1:]
    dx[0] += 0.25 * ge[0]
    dx[1:] += 0.25 * go[:-1]
    dx[-1] += 0.25 * go[-1]
    return np.moveaxis(dx, 0, axis)


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """2x bilinear interpolation with half-pixel centres (align_corners=False)."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeMismatch(f"expected h x w x c or n x h x w x c, got {x.shape}")
    ha, wa = x.ndim - 3, x.ndim - 2
    out = _upsample_axis(_upsample_axis(x.data, ha), wa)

    def bw(g):
        return (_upsample_axis_adjoint(_upsample_axis_adjoint(g, wa), ha),)

    return make_result(out, (x,), bw)


def global_average_broadcast(x: Tensor) -> Tensor:
    """Spatial mean of each channel, broadcast back to the full ``h x w`` grid."""
    x = as_tensor(x)
    axes = (x.ndim - 3, x.ndim - 2)
    return broadcast_to(mean(x, axis=axes, keepdims=True), x.shape)


# ------------------------------------------------------------- normalisation


class BatchNormState:
    """Running moments for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=None):
        from .tensor import default_dtype
        dtype = dtype or default_dtype()
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                 mode: str = "train") -> Tensor:
    """Per-channel normalisation; train mode also updates the running moments."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if state.channels != c or gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"batch-norm parameters do not match {c} channels")
    xd = x.data
    axes = tuple(range(xd.ndim - 1))
    if mode == "train":
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = state.momentum
        state.running_mean = m * state.running_mean + (1 - m) * mu
        state.running_var = m * state.running_var + (1 - m) * var
    elif mode == "infer":
        mu, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mu) * inv_std
    gd = gamma.data
    out = xhat * gd + beta.data
    count = xd.size // c

    def bw(g):
        g2 = g.reshape(-1, c)
        ggamma = (g2 * xhat.reshape(-1, c)).sum(axis=0)
        gbeta = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if mode == "train":
                s1 = dxhat.reshape(-1, c).sum(axis=0)
                s2 = (dxhat * xhat).reshape(-1, c).sum(axis=0)
                gx = inv_std / count * (count * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv_std
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), bw)


def dropout(x: Tensor, rate: float, mode: str = "train",
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if mode == "infer" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape, dtype=np.float32) >= rate).astype(x.data.dtype) * (1.0 / (1.0 - rate))
    return make_result(x.data * keep, (x,), lambda g: (g * keep,))
