"""Differentiable primitives.

Every function accepts Tensors or array-likes and returns a Tensor. Shape
problems raise :class:`ShapeError` naming the op and the offending shapes.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import Tensor, as_tensor, make_result, shape_error

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise shape_error(op, a.shape, b.shape) from None


def _coerce(a, b):
    # python scalars / arrays adopt the tensor dtype so fp32 stays fp32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,))


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    f = a.dtype.type(factor)
    return make_result(a.data * f, (a,), lambda g: (g * f,))


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = (x * cdf).astype(x.dtype, copy=False)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return make_result(out, (a,), backward)


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = _coerce(a, b)
    try:
        np.broadcast_shapes(cond.shape, a.shape, b.shape)
    except ValueError:
        raise shape_error("where", cond.shape, a.shape, b.shape) from None
    zero = np.zeros((), dtype=np.result_type(a.dtype, b.dtype))

    def backward(g):
        ga = _unbroadcast(np.where(cond, g, zero), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(cond, zero, g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(np.where(cond, a.data, b.data), (a, b), backward)


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def var(a, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance."""
    a = as_tensor(a)
    centered = sub(a, mean(a, axis=axis, keepdims=True))
    return mean(mul(centered, centered), axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise shape_error("reshape", a.shape, shape) from None
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if len(axes) != a.ndim:
        raise shape_error("transpose", a.shape, axes)
    inv = np.argsort(axes)
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise shape_error("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tensors, backward)


def gather(a, index, axis: int = 0) -> Tensor:
    """``np.take`` along ``axis``; out-of-range indices are rejected."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    axis = axis % a.ndim
    n = a.shape[axis]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise shape_error("gather", a.shape, index.shape)
    out = np.take(a.data, index, axis=axis)

    def backward(g):
        # move the indexed block to the front, scatter-add, move back
        gmov = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
        gmov = gmov.reshape((index.size,) + gmov.shape[index.ndim:])
        acc = np.zeros((n,) + gmov.shape[1:], dtype=g.dtype)
        np.add.at(acc, index.ravel(), gmov)
        return (np.moveaxis(acc, 0, axis),)

    return make_result(out, (a,), backward)


def scatter_add(base, index, src, axis: int = 0) -> Tensor:
    """``out = base; out[index] += src`` along ``axis`` (duplicates accumulate)."""
    base, src = as_tensor(base), as_tensor(src)
    index = np.asarray(index, dtype=np.intp).ravel()
    axis = axis % base.ndim
    expect = base.shape[:axis] + (index.size,) + base.shape[axis + 1:]
    if src.shape != expect or (index.size and (index.min() < 0 or index.max() >= base.shape[axis])):
        raise shape_error("scatter_add", base.shape, index.shape, src.shape)
    out = np.moveaxis(base.data.copy(), axis, 0)
    np.add.at(out, index, np.moveaxis(src.data, axis, 0))
    out = np.moveaxis(out, 0, axis)

    def backward(g):
        return g, np.take(g, index, axis=axis)

    return make_result(out, (base, src), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise shape_error("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise shape_error("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward)


bmm = matmul


def linear(x, weight, bias=None) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias``; weight is [in, out]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise shape_error("linear", x.shape, weight.shape)
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), weight)
    y = reshape(y, lead + (weight.shape[1],))
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise shape_error("linear", x.shape, weight.shape, bias.shape)
        y = add(y, bias)
    return y


# ---------------------------------------------------------------- softmax / norm

def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``.

    ``mask`` is either boolean (True = keep) or additive (added to the logits,
    ``-inf`` to drop). A row with nothing kept returns all zeros.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask)
        try:
            np.broadcast_shapes(mask.shape, x.shape)
        except ValueError:
            raise shape_error("softmax", x.shape, mask.shape) from None
        if mask.dtype == bool:
            x = np.where(mask, x, -np.inf)
        else:
            x = x + mask.astype(x.dtype)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0).astype(x.dtype)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    y = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (a,), backward)


def instance_norm(a, axis: int = -2, mask=None, eps: float = 1e-5) -> Tensor:
    """Normalise every channel (last axis) over the token axis ``axis``.

    Statistics use biased variance and skip positions where ``mask`` is
    False; those positions output zero. ``mask`` broadcasts against the
    input with the channel axis dropped.
    """
    a = as_tensor(a)
    x = a.data
    axis = axis % x.ndim
    if axis == x.ndim - 1:
        raise shape_error("instance_norm", x.shape, (axis,))
    if mask is None:
        m = np.ones(x.shape[:-1] + (1,), dtype=x.dtype)
    else:
        mask = np.asarray(mask)
        try:
            m = np.broadcast_to(mask[..., None], x.shape[:-1] + (1,)).astype(x.dtype)
        except ValueError:
            raise shape_error("instance_norm", x.shape, mask.shape) from None
    count = np.maximum(m.sum(axis=axis, keepdims=True), 1.0)
    mu = (x * m).sum(axis=axis, keepdims=True) / count
    xc = (x - mu) * m
    variance = (xc * xc).sum(axis=axis, keepdims=True) / count
    inv = (1.0 / np.sqrt(variance + eps)).astype(x.dtype)
    xhat = xc * inv

    def backward(g):
        gm = g * m
        s1 = gm.sum(axis=axis, keepdims=True)
        s2 = (gm * xhat).sum(axis=axis, keepdims=True)
        return (m * inv * (gm - s1 / count - xhat * s2 / count),)

    return make_result(xhat, (a,), backward)


# ---------------------------------------------------------------- convolutions

def conv2d_patch(x, weight, bias=None) -> Tensor:
    """2D convolution with stride equal to kernel size, channels-last.

    x: [..., H, W, C_in]; weight: [p_x, p_y, C_in, C_out]; returns
    [..., H/p_x, W/p_y, C_out].
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim < 3 or weight.ndim != 4:
        raise shape_error("conv2d_patch", x.shape, weight.shape)
    px, py, cin, cout = weight.shape
    *lead, H, W, C = x.shape
    if C != cin or H % px or W % py:
        raise shape_error("conv2d_patch", x.shape, weight.shape)
    lead = tuple(lead)
    n = len(lead)
    patches = reshape(x, lead + (H // px, px, W // py, py, C))
    patches = transpose(patches, tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
    patches = reshape(patches, lead + (H // px, W // py, px * py * C))
    return linear(patches, reshape(weight, (px * py * cin, cout)), bias)


def conv_transpose2d_patch(z, weight, bias=None) -> Tensor:
    """2D transposed convolution with stride equal to kernel size, channels-last.

    z: [..., n_x, n_y, C_in]; weight: [C_in, p_x, p_y, C_out]; bias: [C_out];
    returns [..., n_x*p_x, n_y*p_y, C_out].
    """
    z, weight = as_tensor(z), as_tensor(weight)
    if z.ndim < 3 or weight.ndim != 4 or z.shape[-1] != weight.shape[0]:
        raise shape_error("conv_transpose2d_patch", z.shape, weight.shape)
    cin, px, py, cout = weight.shape
    *lead, nx, ny, _ = z.shape
    lead = tuple(lead)
    n = len(lead)
    y = linear(z, reshape(weight, (cin, px * py * cout)))
    y = reshape(y, lead + (nx, ny, px, py, cout))
    y = transpose(y, tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
    y = reshape(y, lead + (nx * px, ny * py, cout))
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise shape_error("conv_transpose2d_patch", z.shape, weight.shape, bias.shape)
        y = add(y, bias)
    return y
