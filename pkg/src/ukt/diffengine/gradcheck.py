"""Finite-difference validation of the tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor

FD_STEP = 1e-5


def numeric_grad(f: Callable[[], float], array: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def compare(fn: Callable[..., Tensor], inputs: Sequence[Tensor], mask=None, h: float = FD_STEP) -> float:
    """Max relative error of tape gradients of scalar ``fn(*inputs)``.

    Errors are measured per input as ``max|g_tape - g_fd| / max|g_fd|``.
    ``mask`` optionally maps an input index to a boolean array selecting the
    entries to compare (used to skip points near kinks).
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape():
        loss = fn(*inputs)
    grads = loss.tape.backward(loss)

    def value():
        return float(fn(*inputs).data)

    worst = 0.0
    for k, t in enumerate(inputs):
        tape_g = grads.get(t, np.zeros_like(t.data))
        fd = numeric_grad(value, t.data, h)
        keep = np.ones(t.shape, bool) if mask is None or k not in mask else mask[k]
        if not keep.any():
            continue
        scale = max(np.abs(fd[keep]).max(), 1e-12)
        worst = max(worst, float(np.abs(tape_g[keep] - fd[keep]).max() / scale))
    return worst


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin * 10, x)


def _maxpool_input(rng, shape, gap=1e-3):
    # distinct values per window so perturbations never change the argmax
    while True:
        x = rng.standard_normal(shape)
        n, c, h, w = shape
        win = np.sort(x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4), -1)
        if np.min(win[..., -1] - win[..., -2]) > gap:
            return x


def _case(name: str, rng: np.random.Generator):
    """Inputs and a scalar-valued closure for one op, in double precision."""
    t = lambda a: Tensor(np.asarray(a, np.float64))  # noqa: E731
    weights = {}

    def project(out: Tensor) -> Tensor:
        # random linear functional so every output entry contributes
        if out.shape not in weights:
            weights[out.shape] = rng.standard_normal(out.shape)
        return ops.sum(ops.mul(out, weights[out.shape]))

    if name == "conv2d":
        ins = [t(rng.standard_normal((2, 3, 5, 6))), t(rng.standard_normal((4, 3, 3, 3))), t(rng.standard_normal(4))]
        return ins, lambda x, w, b: project(ops.conv2d(x, w, b))
    if name == "conv_transpose2d":
        ins = [t(rng.standard_normal((2, 3, 3, 4))), t(rng.standard_normal((3, 2, 2, 2))), t(rng.standard_normal(2))]
        return ins, lambda x, w, b: project(ops.conv_transpose2d(x, w, b))
    if name == "maxpool2":
        return [t(_maxpool_input(rng, (2, 2, 4, 6)))], lambda x: project(ops.maxpool2(x))
    if name == "group_norm":
        ins = [t(rng.standard_normal((2, 4, 3, 3))), t(rng.standard_normal(4)), t(rng.standard_normal(4))]
        return ins, lambda x, a, b: project(ops.group_norm(x, 2, a, b))
    if name == "leaky_relu":
        return [t(_away_from_zero(rng, (3, 7)))], lambda x: project(ops.leaky_relu(x, 0.2))
    if name == "relu_project":
        return [t(_away_from_zero(rng, (3, 7)))], lambda x: project(ops.relu_project(x))
    if name == "abs":
        return [t(_away_from_zero(rng, (3, 7)))], lambda x: project(ops.abs(x))
    if name == "softplus":
        return [t(3 * rng.standard_normal((3, 7)))], lambda x: project(ops.softplus(x))
    if name == "concat_channels":
        ins = [t(rng.standard_normal((2, 1, 3, 3))), t(rng.standard_normal((2, 2, 3, 3)))]
        return ins, lambda a, b: project(ops.concat_channels(a, b))
    if name in ("add", "sub", "mul"):
        fn = getattr(ops, name)
        return [t(rng.standard_normal((4, 5))), t(rng.standard_normal((4, 5)))], lambda a, b: project(fn(a, b))
    if name == "div":
        ins = [t(rng.standard_normal((4, 5))), t(rng.uniform(0.5, 2.0, (4, 5)))]
        return ins, lambda a, b: project(ops.div(a, b))
    if name == "square":
        return [t(rng.standard_normal((4, 5)))], lambda x: project(ops.square(x))
    if name in ("sqrt", "log"):
        fn = getattr(ops, name)
        return [t(rng.uniform(0.1, 3.0, (4, 5)))], lambda x: project(fn(x))
    if name == "scale":
        c = rng.standard_normal()
        return [t(rng.standard_normal((4, 5)))], lambda x: project(ops.scale(x, c))
    if name == "sum":
        return [t(rng.standard_normal((3, 4)))], lambda x: ops.scale(ops.sum(x), 1.7)
    if name == "mean":
        return [t(rng.standard_normal((3, 4)))], lambda x: ops.scale(ops.mean(x), 1.7)
    if name == "forward_diff":
        return [t(rng.standard_normal((2, 5, 6)))], lambda x: project(ops.add(ops.forward_diff(x, -1), ops.forward_diff(x, -2)))
    if name == "linear_map":
        m = rng.standard_normal((7, 12))
        fwd = lambda a: (a.reshape(*a.shape[:-2], 12) @ m.T)  # noqa: E731
        adj = lambda g: (g @ m).reshape(*g.shape[:-1], 3, 4)  # noqa: E731
        return [t(rng.standard_normal((2, 3, 4)))], lambda x: project(ops.linear_map(x, fwd, adj))
    raise ValueError(f"unknown op {name!r}; supported: {ops.OPS}")


def gradcheck(op_name: str, seed: int = 0) -> dict:
    """Compare tape and finite-difference gradients for one op in double precision.

    Inputs near non-differentiable points are moved away from them before the
    comparison (kinks of leaky_relu, relu_project and abs, and maxpool ties).
    """
    if op_name not in ops.OPS:
        raise ValueError(f"unknown op {op_name!r}; supported: {ops.OPS}")
    rng = np.random.default_rng(seed)
    inputs, fn = _case(op_name, rng)
    return {"op": op_name, "seed": seed, "max_rel_err": compare(fn, inputs)}
