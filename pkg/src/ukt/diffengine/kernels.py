"""3x3 'same' convolution kernels (cross-correlation, zero padding 1).

Two interchangeable backends compute the forward value and both gradients:
torch's CPU convolution routines, and a pure numpy im2col fallback used to
cross-check them.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import torch
except ImportError:  # pragma: no cover - torch is a declared dependency
    torch = None

_BACKEND = ["torch" if torch is not None else "numpy"]


def set_conv_backend(name: str) -> None:
    if name not in ("torch", "numpy"):
        raise ValueError(f"unknown conv backend {name!r}")
    if name == "torch" and torch is None:
        raise RuntimeError("torch is not installed")
    _BACKEND[0] = name


def get_conv_backend() -> str:
    return _BACKEND[0]


class conv_backend:
    """Context manager selecting a conv backend temporarily."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        self._saved = get_conv_backend()
        set_conv_backend(self.name)

    def __exit__(self, *exc):
        set_conv_backend(self._saved)


# ---------------------------------------------------------------------------
# numpy


def _patches(x):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(xp, (3, 3), axis=(2, 3))  # (N, C, H, W, 3, 3)


def _np_forward(x, w, b):
    out = np.einsum("nchwij,ocij->nohw", _patches(x), w, optimize=True)
    if b is not None:
        out += b[None, :, None, None]
    return out


def _np_backward(x, w, g, need_x, need_w):
    gx = gw = None
    if need_w:
        gw = np.einsum("nchwij,nohw->ocij", _patches(x), g, optimize=True)
    if need_x:
        w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = _np_forward(g, w_t, None)
    return gx, gw


# ---------------------------------------------------------------------------
# torch


def _t(a):
    return torch.from_numpy(np.ascontiguousarray(a))


def _torch_forward(x, w, b):
    with torch.no_grad():
        out = torch.nn.functional.conv2d(_t(x), _t(w), None if b is None else _t(b), padding=1)
    return out.numpy()


def _torch_backward(x, w, g, need_x, need_w):
    with torch.no_grad():
        gx, gw, _ = torch.ops.aten.convolution_backward(
            _t(g), _t(x), _t(w), None, [1, 1], [1, 1], [1, 1], False, [0, 0], 1,
            [need_x, need_w, False],
        )
    return (gx.numpy() if need_x else None), (gw.numpy() if need_w else None)


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b=None) -> np.ndarray:
    if _BACKEND[0] == "torch":
        return _torch_forward(x, w, b)
    return _np_forward(x, w, b)


def conv3x3_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray, need_x=True, need_w=True):
    """Gradients (d/dx, d/dw) of ``sum(g * conv(x, w))``; unneeded ones are None."""
    if _BACKEND[0] == "torch":
        return _torch_backward(x, w, g, need_x, need_w)
    return _np_backward(x, w, g, need_x, need_w)
