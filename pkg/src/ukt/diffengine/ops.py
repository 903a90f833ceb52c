"""The closed set of differentiable operations.

Tensor-tensor arithmetic requires equal shapes. A plain number or numpy array
may appear as a constant operand and is broadcast against the tensor.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .kernels import conv3x3_backward, conv3x3_forward
from .tensor import Tensor, current_tape

SQRT_LOG_EPS = 1e-8
GROUP_NORM_EPS = 1e-5


def _result(data: np.ndarray, inputs, backward: Callable) -> Tensor:
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward)
    return out


def _pair(a, b):
    """Promote a constant operand; returns (a, b, shape)."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
        return a, b
    if isinstance(a, Tensor):
        const = np.asarray(b, dtype=a.dtype)
        np.broadcast_shapes(const.shape, a.shape)
        return a, Tensor._wrap(np.broadcast_to(const, a.shape))
    if isinstance(b, Tensor):
        const = np.asarray(a, dtype=b.dtype)
        np.broadcast_shapes(const.shape, b.shape)
        return Tensor._wrap(np.broadcast_to(const, b.shape)), b
    raise TypeError("at least one operand must be a Tensor")


def _check_same_dtype(*ts):
    if len({t.dtype for t in ts}) > 1:
        raise TypeError(f"mixed precision inputs: {[str(t.dtype) for t in ts]}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _result(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def sqrt(x: Tensor, eps: float = SQRT_LOG_EPS) -> Tensor:
    out = np.sqrt(x.data + x.dtype.type(eps))
    return _result(out, (x,), lambda g: (g / (2 * out),))


def log(x: Tensor, eps: float = SQRT_LOG_EPS) -> Tensor:
    shifted = x.data + x.dtype.type(eps)
    return _result(np.log(shifted), (x,), lambda g: (g / shifted,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the math name
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(x.dtype.type(0), x.data)
    return _result(out, (x,), lambda g: (g * _sigmoid(x.data),))


def _sigmoid(v):
    # split by sign so neither branch overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1 / (1 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1 + e)
    return out


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    # right derivative at 0, so the kink belongs to the identity branch
    pos = x.data >= 0
    slope = x.dtype.type(slope)
    out = np.where(pos, x.data, slope * x.data)
    return _result(out, (x,), lambda g: (np.where(pos, g, slope * g),))


def relu_project(x: Tensor) -> Tensor:
    """Projection onto the nonnegative orthant; gradient passes only where x > 0."""
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


# ---------------------------------------------------------------------------
# reductions and structure


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.dtype.type(x.size)
    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                   lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    if len(tensors) < 2:
        raise ValueError("concat_channels needs at least two tensors")
    _check_same_dtype(*tensors)
    ref = tensors[0].shape
    for t in tensors:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"cannot concatenate shapes {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)
    return _result(out, tensors, lambda g: tuple(np.split(g, splits, axis=1)))


def forward_diff(x: Tensor, axis: int) -> Tensor:
    """Forward difference along ``axis`` with a zero at the far edge."""
    axis = axis % x.data.ndim
    out = np.zeros_like(x.data)
    lead = (slice(None),) * axis
    out[lead + (slice(0, -1),)] = np.diff(x.data, axis=axis)

    def backward(g):
        gx = np.zeros_like(g)
        body = g[lead + (slice(0, -1),)]
        gx[lead + (slice(0, -1),)] -= body
        gx[lead + (slice(1, None),)] += body
        return (gx,)

    return _result(out, (x,), backward)


def linear_map(x: Tensor, forward: Callable, adjoint: Callable) -> Tensor:
    """Apply a fixed linear operator given as a forward/adjoint pair."""
    out = np.asarray(forward(x.data), dtype=x.dtype)
    return _result(out, (x,), lambda g: (np.asarray(adjoint(g), dtype=x.dtype),))


# ---------------------------------------------------------------------------
# network layers


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation with zero padding 1 and optional per-channel bias."""
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[2:] != (3, 3):
        raise ValueError(f"conv2d expects NCHW input and OC33 kernel, got {x.shape}, {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
    inputs = (x, w) if b is None else (x, w, b)
    _check_same_dtype(*inputs)
    out = conv3x3_forward(x.data, w.data, None if b is None else b.data)

    def backward(g):
        gx, gw = conv3x3_backward(x.data, w.data, g, x.requires_grad, w.requires_grad)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, inputs, backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Transposed convolution with a 2x2 kernel and stride 2 (exact 2x upsampling).

    ``w`` has shape (in_channels, out_channels, 2, 2).
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[2:] != (2, 2):
        raise ValueError(f"conv_transpose2d expects NCHW input and IO22 kernel, got {x.shape}, {w.shape}")
    if w.shape[0] != x.shape[1]:
        raise ValueError(f"conv_transpose2d channel mismatch: input {x.shape[1]}, kernel {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[1]} output channels")
    inputs = (x, w) if b is None else (x, w, b)
    _check_same_dtype(*inputs)
    n, _, h, wd = x.shape
    co = w.shape[1]
    out = np.einsum("ncij,copq->noipjq", x.data, w.data, optimize=True).reshape(n, co, 2 * h, 2 * wd)
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        g6 = g.reshape(n, co, h, 2, wd, 2)
        gx = np.einsum("noipjq,copq->ncij", g6, w.data, optimize=True)
        gw = np.einsum("noipjq,ncij->copq", g6, x.data, optimize=True)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, inputs, backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties send the gradient to the first maximum in scan order."""
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"maxpool2 needs NCHW input with even spatial size, got {x.shape}")
    n, c, h, w = x.shape
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _result(out, (x,), backward)


def group_norm(x: Tensor, groups: int, gain: Tensor, shift: Tensor, eps: float = GROUP_NORM_EPS) -> Tensor:
    """Normalise each group of channels per sample, then apply a per-channel affine map."""
    if x.data.ndim != 4:
        raise ValueError(f"group_norm expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ValueError(f"groups={groups} does not divide {c} channels")
    if gain.shape != (c,) or shift.shape != (c,):
        raise ValueError("gain and shift must have one entry per channel")
    _check_same_dtype(x, gain, shift)
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv = 1 / np.sqrt(var + x.dtype.type(eps))
    xhat = ((xg - mu) * inv).reshape(x.shape)
    out = xhat * gain.data[None, :, None, None] + shift.data[None, :, None, None]

    def backward(g):
        dxhat = (g * gain.data[None, :, None, None]).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xh * (dxhat * xh).mean(axis=-1, keepdims=True))
        return dx.reshape(x.shape), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _result(out, (x, gain, shift), backward)


OPS = (
    "conv2d", "conv_transpose2d", "maxpool2", "group_norm", "leaky_relu", "softplus",
    "concat_channels", "add", "sub", "mul", "div", "square", "sqrt", "log", "scale",
    "sum", "mean", "relu_project", "abs", "forward_diff", "linear_map",
)
