"""Differentiable operators.

Every operator takes and returns :class:`Tensor` objects. Backward closures
return one gradient per parent, in parent order, or ``None`` where no gradient
flows.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor, as_tensor

_make = Tensor._from_op


def _pair(a, b):
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        return as_tensor(a, dtype=b.dtype), b
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype if not isinstance(b, Tensor) else None)
    return a, b


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = x.data > lo
    return _make(np.where(mask, x.data, x.data.dtype.type(lo)), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))

    def backward(g):
        s = np.empty_like(xd)
        pos = xd >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
        ex = np.exp(xd[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return _make(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for {x.ndim}-d tensor")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    weights = e / s

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (x,), backward)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(np.asarray(x.data.mean(axis=axes, keepdims=keepdims)), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from exc
    orig = x.shape
    return _make(out, (x,), lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inverse),))


def take(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradient scatters back with accumulation."""
    if isinstance(index, Tensor):
        index = index.data
    out = x.data[index]
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics over leading dims."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored input-major (I x O)."""
    if x.ndim != 2 or w.ndim != 2:
        raise DimensionError(f"linear expects 2-d input and weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[1]} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear bias shape {b.shape} does not match {w.shape[1]} outputs")
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _make(out, parents, backward)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, pad: int, exact: bool = False) -> int:
    """Output extent of a sliding window; floors like common frameworks unless ``exact``."""
    span = size + 2 * pad - k
    if span < 0:
        raise DimensionError(f"kernel {k} larger than padded input {size + 2 * pad}")
    if exact and span % stride:
        raise DimensionError(
            f"conv output size not integral: ({size} + 2*{pad} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (B, C, Ho, Wo, k, k) -> (B, C, k, k, Ho, Wo) -> (B, C*k*k, Ho*Wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * k * k, ho * wo)


def conv2d(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0, exact: bool = False
) -> Tensor:
    """2-d cross-correlation, ``x`` B x C x H x W, ``w`` O x C x k x k.

    With ``exact=True`` a stride that does not tile the padded input evenly is
    a DimensionError instead of dropping the trailing rows/columns.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    bsz, c, h, wd_ = x.shape
    o, cw, k, k2 = w.shape
    if cw != c or k != k2:
        raise DimensionError(f"conv2d weight {w.shape} incompatible with input {x.shape}")
    ho = conv_output_size(h, k, stride, pad, exact)
    wo = conv_output_size(wd_, k, stride, pad, exact)

    xd = x.data
    if k == 1 and pad == 0:
        xs = xd if stride == 1 else xd[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = np.ascontiguousarray(xs).reshape(bsz, c, ho * wo)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        cols = _im2col(xp, k, stride, ho, wo)
    wmat = w.data.reshape(o, c * k * k)
    out = np.matmul(wmat, cols)
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(bsz, o, ho, wo)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(bsz, o, ho * wo)
        gw = None
        if w.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2)
            if k == 1 and pad == 0:
                dcols = dcols.reshape(bsz, c, ho, wo)
                if stride == 1:
                    gx = dcols
                else:
                    gx = np.zeros_like(xd)
                    gx[:, :, : ho * stride : stride, : wo * stride : stride] = dcols
            else:
                dcols = dcols.reshape(bsz, c, k, k, ho, wo)
                gxp = np.zeros((bsz, c, h + 2 * pad, wd_ + 2 * pad), dtype=xd.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
                gx = gxp[:, :, pad : pad + h, pad : pad + wd_] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))

    return _make(out, parents, backward)


def max_pool2d(x: Tensor, k: int = 3, stride: int = 2, pad: int = 1) -> Tensor:
    bsz, c, h, w = x.shape
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(w, k, stride, pad)
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(bsz, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * (arg == idx)
        return (gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp,)

    return _make(np.ascontiguousarray(out), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, B x C x H x W -> B x C x 1 x 1."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects a 4-d tensor, got {x.shape}")
    return mean(x, axis=(2, 3), keepdims=True)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over all axes but the channel axis (axis 1).

    In training mode the running statistics are updated in place, with the
    unbiased batch variance feeding ``running_var``.
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batch_norm expects a 2-d or 4-d tensor, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm affine params must have shape ({c},)")
    if x.shape[0] == 0:
        raise DimensionError("batch_norm on an empty batch")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    xd = x.data
    count = xd.size // c

    if training:
        if count < 2:
            raise DimensionError("batch_norm in training mode needs more than one value per channel")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (count / (count - 1))
    else:
        mu = running_mean.astype(xd.dtype, copy=False)
        var = running_var.astype(xd.dtype, copy=False)

    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * invstd.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                gx = (invstd.reshape(bshape) / count) * (
                    count * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = dxhat * invstd.reshape(bshape)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = sqrt(sum(mul(x, x), axis=axis, keepdims=True) + eps)
    return div(x, norm)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)

    def backward(g):
        return unbroadcast(g * pick_a, a.shape), unbroadcast(g * ~pick_a, b.shape)

    return _make(out, (a, b), backward)


