"""Unrolled Bayesian gradient network.

One block maps (x, grad_d, m) to a reconstruction update and a feedback
channel. The encoder convolutions carry a mean-field Gaussian posterior over
their weights and are sampled with the local reparametrisation trick; the
decoder and the two output heads are point estimates. The same block is
applied K times.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import diffengine as de
from .diffengine import Tensor

VAR_FLOOR = 1e-6
ACT_VAR_EPS = 1e-8


def softplus_inv(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


@dataclass(frozen=True)
class NetConfig:
    """Architecture settings.

    ``grad_scale`` multiplies the data-fidelity gradient before it enters the
    block; a natural value is ``1 / ||A||^2`` (one Landweber step).
    """

    c1: int = 16
    c2: int = 32
    groups: int = 4
    slope: float = 0.2
    K: int = 3
    head_scale: float = 0.1
    grad_scale: float = 1.0
    init_sigma: float = 1e-3
    act_var_eps: float = ACT_VAR_EPS

    def __post_init__(self):
        if self.c1 < 1 or self.c2 < 1:
            raise ValueError("channel counts must be >= 1")
        if self.groups < 1 or self.c1 % self.groups or self.c2 % self.groups:
            raise ValueError(f"groups={self.groups} must divide c1={self.c1} and c2={self.c2}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.init_sigma > 0:
            raise ValueError("init_sigma must be positive")
        if self.act_var_eps < 0:
            raise ValueError("act_var_eps must be nonnegative")


@dataclass
class VariationalConv:
    """3x3 conv with independent Gaussian weights, sigma = softplus(rho)."""

    w_mean: Tensor
    w_rho: Tensor
    b_mean: Tensor
    b_rho: Tensor

    def __post_init__(self):
        if self.w_mean.shape != self.w_rho.shape or self.b_mean.shape != self.b_rho.shape:
            raise ValueError("mean and rho shapes differ")

    def pairs(self):
        return ((self.w_mean, self.w_rho), (self.b_mean, self.b_rho))

    def collapsed(self) -> bool:
        """True when every scale is exactly zero (rho = -inf)."""
        return bool(np.isneginf(self.w_rho.data).all() and np.isneginf(self.b_rho.data).all())


@dataclass
class Conv:
    w: Tensor
    b: Tensor


@dataclass
class Norm:
    gain: Tensor
    shift: Tensor


@dataclass
class NetworkParams:
    config: NetConfig
    encoder: list  # VariationalConv x4
    encoder_norms: list  # Norm x4
    up: Conv
    decoder: list  # Conv x2
    decoder_norms: list  # Norm x2
    heads: dict  # {"mu": (Conv, Norm, Conv), "sigma": (...)}

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """All trainable tensors in a fixed order."""
        out = []
        for i, (layer, norm) in enumerate(zip(self.encoder, self.encoder_norms)):
            out += [(f"enc{i}.w_mean", layer.w_mean), (f"enc{i}.w_rho", layer.w_rho),
                    (f"enc{i}.b_mean", layer.b_mean), (f"enc{i}.b_rho", layer.b_rho),
                    (f"enc{i}.gain", norm.gain), (f"enc{i}.shift", norm.shift)]
        out += [("up.w", self.up.w), ("up.b", self.up.b)]
        for i, (conv, norm) in enumerate(zip(self.decoder, self.decoder_norms)):
            out += [(f"dec{i}.w", conv.w), (f"dec{i}.b", conv.b),
                    (f"dec{i}.gain", norm.gain), (f"dec{i}.shift", norm.shift)]
        for name in ("mu", "sigma"):
            c1, n1, c2 = self.heads[name]
            out += [(f"{name}.0.w", c1.w), (f"{name}.0.b", c1.b), (f"{name}.0.gain", n1.gain),
                    (f"{name}.0.shift", n1.shift), (f"{name}.1.w", c2.w), (f"{name}.1.b", c2.b)]
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.tensors()))

    def encoder_parameter_count(self) -> int:
        """Number of Bayesian weights (each carrying a mean and a scale)."""
        return int(sum(layer.w_mean.size + layer.b_mean.size for layer in self.encoder))

    @property
    def dtype(self):
        return self.up.w.dtype

    def copy(self) -> "NetworkParams":
        return from_arrays(self.config, {k: t.data for k, t in self.named_tensors()})

    def load_arrays(self, arrays: dict) -> None:
        """Overwrite tensor values in place (shapes must match)."""
        for name, t in self.named_tensors():
            src = np.asarray(arrays[name])
            if src.shape != t.shape:
                raise ValueError(f"{name}: shape {src.shape} != {t.shape}")
            t.data = np.array(src, dtype=t.dtype, copy=True)

    def set_requires_grad(self, flag: bool = True) -> None:
        for t in self.tensors():
            t.requires_grad = flag
            t.grad = None


def _layer_shapes(cfg: NetConfig) -> dict:
    c1, c2 = cfg.c1, cfg.c2
    shapes = {}
    for i, (ci, co) in enumerate([(3, c1), (c1, c1), (c1, c2), (c2, c2)]):
        shapes[f"enc{i}.w_mean"] = shapes[f"enc{i}.w_rho"] = (co, ci, 3, 3)
        shapes[f"enc{i}.b_mean"] = shapes[f"enc{i}.b_rho"] = (co,)
        shapes[f"enc{i}.gain"] = shapes[f"enc{i}.shift"] = (co,)
    shapes["up.w"], shapes["up.b"] = (c2, c1, 2, 2), (c1,)
    for i, ci in enumerate([2 * c1, c1]):
        shapes[f"dec{i}.w"], shapes[f"dec{i}.b"] = (c1, ci, 3, 3), (c1,)
        shapes[f"dec{i}.gain"] = shapes[f"dec{i}.shift"] = (c1,)
    for name in ("mu", "sigma"):
        shapes[f"{name}.0.w"], shapes[f"{name}.0.b"] = (c1, c1, 3, 3), (c1,)
        shapes[f"{name}.0.gain"] = shapes[f"{name}.0.shift"] = (c1,)
        shapes[f"{name}.1.w"], shapes[f"{name}.1.b"] = (1, c1, 3, 3), (1,)
    return shapes


def from_arrays(cfg: NetConfig, arrays: dict, dtype=None) -> NetworkParams:
    """Assemble parameters from a name -> array mapping (see ``named_tensors``)."""
    shapes = _layer_shapes(cfg)
    missing = set(shapes) - set(arrays)
    if missing:
        raise ValueError(f"missing parameter arrays: {sorted(missing)}")

    def t(name):
        a = np.asarray(arrays[name])
        if a.shape != shapes[name]:
            raise ValueError(f"{name}: shape {a.shape}, expected {shapes[name]}")
        return Tensor(a, dtype=dtype or (a.dtype if a.dtype in (np.float32, np.float64) else None), name=name)

    return NetworkParams(
        config=cfg,
        encoder=[VariationalConv(t(f"enc{i}.w_mean"), t(f"enc{i}.w_rho"), t(f"enc{i}.b_mean"), t(f"enc{i}.b_rho"))
                 for i in range(4)],
        encoder_norms=[Norm(t(f"enc{i}.gain"), t(f"enc{i}.shift")) for i in range(4)],
        up=Conv(t("up.w"), t("up.b")),
        decoder=[Conv(t(f"dec{i}.w"), t(f"dec{i}.b")) for i in range(2)],
        decoder_norms=[Norm(t(f"dec{i}.gain"), t(f"dec{i}.shift")) for i in range(2)],
        heads={name: (Conv(t(f"{name}.0.w"), t(f"{name}.0.b")), Norm(t(f"{name}.0.gain"), t(f"{name}.0.shift")),
                      Conv(t(f"{name}.1.w"), t(f"{name}.1.b"))) for name in ("mu", "sigma")},
    )


def init_network(cfg: NetConfig, rng: np.random.Generator, dtype=np.float32) -> NetworkParams:
    """He-normal means, constant rho = softplus^-1(init_sigma), zero biases, unit norms."""
    rho = softplus_inv(cfg.init_sigma)
    arrays = {}
    for name, shape in _layer_shapes(cfg).items():
        kind = name.rsplit(".", 1)[1]
        if kind in ("w_mean", "w"):
            # transposed conv: each output pixel sees one tap per input channel
            fan_in = shape[0] if name == "up.w" else shape[1] * 9
            arrays[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        elif kind in ("w_rho", "b_rho"):
            arrays[name] = np.full(shape, rho)
        elif kind == "gain":
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = np.zeros(shape)
    for head in ("mu", "sigma"):
        arrays[f"{head}.1.w"] = arrays[f"{head}.1.w"] * cfg.head_scale
    return from_arrays(cfg, {k: v.astype(dtype) for k, v in arrays.items()})


# ---------------------------------------------------------------------------
# noise sources for the local reparametrisation


class GaussianNoise:
    """Fresh standard normal draws from a numpy Generator."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def __call__(self, shape, dtype) -> np.ndarray:
        return self.rng.standard_normal(shape, dtype=np.dtype(dtype))


class FrozenNoise:
    """Replayable noise: call ``k`` returns the same per-sample draw for every batch item.

    Makes a batched forward equal to the stack of singleton forwards, and
    lets finite differences see the same noise on every evaluation
    (call :meth:`reset` before each forward).
    """

    def __init__(self, seed: int):
        self.seed = seed
        self.calls = 0

    def reset(self) -> None:
        self.calls = 0

    def __call__(self, shape, dtype) -> np.ndarray:
        rng = np.random.default_rng([self.seed, self.calls])
        self.calls += 1
        one = rng.standard_normal(shape[1:]).astype(dtype)
        return np.broadcast_to(one, shape)


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class IterateState:
    x: Tensor
    m: Tensor
    grad_d: Tensor


@dataclass
class NetworkOutput:
    mu: Tensor
    sigma_raw: Tensor
    m_next: Tensor


def bayes_conv(layer: VariationalConv, h: Tensor, mode: str, noise: Optional[Callable],
               var_eps: float = ACT_VAR_EPS) -> Tensor:
    """Activation of a Bayesian conv: mean in ``mean`` mode, one reparametrised draw in ``sample`` mode."""
    a_mu = de.conv2d(h, layer.w_mean, layer.b_mean)
    if mode == "mean" or layer.collapsed():
        return a_mu
    sw, sb = de.softplus(layer.w_rho), de.softplus(layer.b_rho)
    a_var = de.conv2d(de.square(h), de.square(sw), de.square(sb))
    eps = noise(a_mu.shape, a_mu.dtype)
    return de.add(a_mu, de.mul(de.sqrt(a_var, var_eps), eps))


def _gn_act(h, norm: Norm, cfg: NetConfig):
    return de.leaky_relu(de.group_norm(h, cfg.groups, norm.gain, norm.shift), cfg.slope)


def _head(parts, h, cfg):
    c1, n1, c2 = parts
    return de.conv2d(_gn_act(de.conv2d(h, c1.w, c1.b), n1, cfg), c2.w, c2.b)


def sample_block(params: NetworkParams, state: IterateState, mode: str = "sample",
                 noise: Optional[Callable] = None) -> NetworkOutput:
    """One application of the learned block to NCHW single-channel images."""
    if mode not in ("sample", "mean"):
        raise ValueError(f"mode must be 'sample' or 'mean', got {mode!r}")
    if mode == "sample" and noise is None:
        raise ValueError("sample mode needs a noise source")
    shapes = {state.x.shape, state.m.shape, state.grad_d.shape}
    if len(shapes) != 1 or state.x.data.ndim != 4 or state.x.shape[1] != 1:
        raise ValueError(f"state images must share one (N, 1, H, W) shape, got {shapes}")
    h_img, w_img = state.x.shape[2:]
    if h_img % 2 or w_img % 2:
        raise ValueError("image sides must be even for the pooling stage")
    cfg = params.config
    h = de.concat_channels(state.x, de.scale(state.grad_d, cfg.grad_scale), state.m)
    for i in (0, 1):
        h = _gn_act(bayes_conv(params.encoder[i], h, mode, noise, cfg.act_var_eps), params.encoder_norms[i], cfg)
    skip = h
    h = de.maxpool2(h)
    for i in (2, 3):
        h = _gn_act(bayes_conv(params.encoder[i], h, mode, noise, cfg.act_var_eps), params.encoder_norms[i], cfg)
    h = de.conv_transpose2d(h, params.up.w, params.up.b)
    h = de.concat_channels(h, skip)
    for conv, norm in zip(params.decoder, params.decoder_norms):
        h = _gn_act(de.conv2d(h, conv.w, conv.b), norm, cfg)
    residual = _head(params.heads["mu"], h, cfg)
    sigma_raw = _head(params.heads["sigma"], h, cfg)
    mu = de.relu_project(de.add(state.x, residual))
    return NetworkOutput(mu=mu, sigma_raw=sigma_raw, m_next=sigma_raw)


def _as_nchw(a, dtype, image_shape) -> Tensor:
    if isinstance(a, Tensor):
        arr = a.data
    else:
        arr = np.asarray(a)
    if arr.shape[-2:] != tuple(image_shape):
        raise ValueError(f"expected images of shape {tuple(image_shape)}, got {arr.shape}")
    arr = arr.reshape(-1, 1, *image_shape)
    if isinstance(a, Tensor) and a.data.ndim == 4:
        return a
    return Tensor._wrap(np.ascontiguousarray(arr, dtype=dtype))


def data_gradient(x: Tensor, y_const: np.ndarray, op) -> Tensor:
    """A^T (A x - y) as a differentiable function of x (NCHW)."""
    aty = op.adjoint(y_const)
    normal = lambda v: op.adjoint(op.forward(v))  # noqa: E731
    return de.sub(de.linear_map(x, normal, normal), aty)


def unrolled_forward(params: NetworkParams, y, op, x0, m0=None, mode: str = "sample",
                     noise: Optional[Callable] = None, steps: Optional[int] = None):
    """Run K shared-weight blocks; returns (final NetworkOutput, list of IterateState).

    ``y`` has shape (..., n_angles, n_detectors) and ``x0`` / ``m0`` (..., H, W)
    with matching leading dimensions. ``m0`` defaults to zeros.
    """
    dtype = params.dtype
    op_d = op.astype(dtype)
    image_shape = op.image_shape
    x = _as_nchw(x0, dtype, image_shape)
    m = _as_nchw(np.zeros(x.shape, dtype) if m0 is None else m0, dtype, image_shape)
    y_arr = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=dtype)
    if y_arr.shape[-2:] != tuple(op.sino_shape):
        raise ValueError(f"sinogram shape {y_arr.shape} does not match geometry {op.sino_shape}")
    y_arr = y_arr.reshape(-1, 1, *op.sino_shape)
    if y_arr.shape[0] != x.shape[0]:
        raise ValueError(f"batch mismatch: {y_arr.shape[0]} sinograms, {x.shape[0]} images")
    trajectory = []
    out = None
    for _ in range(params.config.K if steps is None else steps):
        grad_d = data_gradient(x, y_arr, op_d)
        out = sample_block(params, IterateState(x, m, grad_d), mode, noise)
        x, m = out.mu, out.m_next
        trajectory.append(IterateState(x, m, grad_d))
    return out, trajectory


def variance_from_head(sigma_raw):
    """Per-pixel variance ``softplus(sigma_raw) + 1e-6``; accepts a Tensor or an array."""
    if isinstance(sigma_raw, Tensor):
        return de.add(de.softplus(sigma_raw), VAR_FLOOR)
    return np.logaddexp(0.0, np.asarray(sigma_raw)) + VAR_FLOOR


# ---------------------------------------------------------------------------
# posterior snapshots


@dataclass(frozen=True)
class PosteriorSnapshot:
    """Frozen (mean, sigma) arrays of every encoder weight and bias."""

    means: tuple
    sigmas: tuple
    names: tuple = field(default=())

    def __post_init__(self):
        for a in self.means + self.sigmas:
            a.flags.writeable = False


def encoder_pairs(params: NetworkParams):
    """(name, mean tensor, rho tensor) for every Bayesian weight group."""
    out = []
    for i, layer in enumerate(params.encoder):
        out.append((f"enc{i}.w", layer.w_mean, layer.w_rho))
        out.append((f"enc{i}.b", layer.b_mean, layer.b_rho))
    return out


def snapshot_posterior(params: NetworkParams) -> PosteriorSnapshot:
    pairs = encoder_pairs(params)
    means = tuple(np.array(m.data, copy=True) for _, m, _ in pairs)
    sigmas = tuple(np.logaddexp(m.dtype.type(0), r.data) for _, m, r in pairs)
    return PosteriorSnapshot(means, sigmas, tuple(n for n, _, _ in pairs))


def with_collapsed_posterior(params: NetworkParams, sigma: float = 0.0) -> NetworkParams:
    """Copy whose encoder scales are all ``sigma`` (0 gives rho = -inf)."""
    out = params.copy()
    rho = -np.inf if sigma == 0 else softplus_inv(sigma)
    for layer in out.encoder:
        layer.w_rho.data[...] = rho
        layer.b_rho.data[...] = rho
    return out


def with_head_scale(params: NetworkParams, factor: float) -> NetworkParams:
    """Copy with both final head kernels and biases multiplied by ``factor``."""
    out = params.copy()
    for head in out.heads.values():
        head[2].w.data = head[2].w.data * head[2].w.dtype.type(factor)
        head[2].b.data = head[2].b.data * head[2].b.dtype.type(factor)
    out.config = replace(out.config, head_scale=out.config.head_scale * factor)
    return out
