"""Objective terms for both training phases."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import diffengine as de
from .bayesnet import (
    NetworkParams,
    PosteriorSnapshot,
    encoder_pairs,
    unrolled_forward,
    variance_from_head,
)
from .diffengine import Tensor

EXACT_TRACE_MAX_PIXELS = 128 * 128


@dataclass
class GaussianDiag:
    """Diagonal Gaussian; fields may be Tensors (differentiable) or arrays."""

    mean: object
    sigma: object

    def __post_init__(self):
        m = self.mean.data if isinstance(self.mean, Tensor) else np.asarray(self.mean)
        s = self.sigma.data if isinstance(self.sigma, Tensor) else np.asarray(self.sigma)
        if m.shape != s.shape:
            raise ValueError(f"mean shape {m.shape} != sigma shape {s.shape}")
        if not (s > 0).all():
            raise ValueError("sigma must be positive")


@dataclass(frozen=True)
class HyperParams:
    beta: float = 1e-3
    gamma: float = 1e-2
    hutchinson_samples: int = 10
    train_mc_samples: int = 1
    tv_variant: str = "isotropic"
    tv_smooth_eps: float = 1e-6
    trace_mode: str = "hutchinson"

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be nonnegative")
        if self.hutchinson_samples < 1 or self.train_mc_samples < 1:
            raise ValueError("sample counts must be >= 1")
        if self.tv_variant not in ("isotropic", "anisotropic"):
            raise ValueError(f"unknown tv variant {self.tv_variant!r}")
        if self.trace_mode not in ("hutchinson", "exact"):
            raise ValueError(f"unknown trace mode {self.trace_mode!r}")


@dataclass
class LossBreakdown:
    fidelity_or_nll: Tensor
    trace: Tensor
    tv: Tensor
    kl: Tensor
    total: Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).data) for k in ("fidelity_or_nll", "trace", "tv", "kl", "total")}


def _tensor(a, dtype=None) -> Tensor:
    return a if isinstance(a, Tensor) else Tensor(np.asarray(a), dtype=dtype)


def hetero_nll(x_true, mu, var) -> Tensor:
    """0.5 * sum((x - mu)^2 / var + log var), the Gaussian NLL without the 2*pi constant."""
    mu, var = _tensor(mu), _tensor(var, getattr(mu, "dtype", None))
    x = np.asarray(x_true.data if isinstance(x_true, Tensor) else x_true, dtype=mu.dtype)
    if x.shape != mu.shape or var.shape != mu.shape:
        raise ValueError(f"shape mismatch: x {x.shape}, mu {mu.shape}, var {var.shape}")
    if not (var.data > 0).all():
        raise ValueError("variance must be strictly positive")
    r2 = de.square(de.sub(x, mu))
    return de.scale(de.sum(de.add(de.div(r2, var), de.log(var, eps=0.0))), 0.5)


def kl_diag_gauss(q: GaussianDiag, p: GaussianDiag) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over components.

    Gradients flow through whichever fields of ``q`` are Tensors; ``p`` is
    treated as constant.
    """
    mq, sq = _tensor(q.mean), _tensor(q.sigma)
    dtype = mq.dtype
    mp = np.asarray(p.mean.data if isinstance(p.mean, Tensor) else p.mean, dtype=dtype)
    sp = np.asarray(p.sigma.data if isinstance(p.sigma, Tensor) else p.sigma, dtype=dtype)
    if mq.shape != mp.shape or sq.shape != sp.shape:
        raise ValueError(f"length mismatch: q {mq.shape}, p {mp.shape}")
    log_ratio = de.sub(np.log(sp), de.log(sq, eps=0.0))
    quad = de.div(de.add(de.square(sq), de.square(de.sub(mq, mp))), 2 * sp * sp)
    return de.sum(de.sub(de.add(log_ratio, quad), 0.5))


def encoder_kl(params: NetworkParams, prior: Optional[PosteriorSnapshot] = None) -> Tensor:
    """KL of the encoder posterior to ``prior`` (standard normal when None)."""
    total = None
    for k, (_, mean, rho) in enumerate(encoder_pairs(params)):
        q = GaussianDiag(mean, de.softplus(rho))
        if prior is None:
            p = GaussianDiag(np.zeros(mean.shape, mean.dtype), np.ones(mean.shape, mean.dtype))
        else:
            p = GaussianDiag(prior.means[k], prior.sigmas[k])
        term = kl_diag_gauss(q, p)
        total = term if total is None else de.add(total, term)
    return total


def tv_seminorm(image, variant: str = "isotropic", smooth_eps: float = 0.0) -> Tensor:
    """Total variation over the last two axes with zero-padded forward differences."""
    u = _tensor(image)
    dx, dy = de.forward_diff(u, -1), de.forward_diff(u, -2)
    if variant == "anisotropic":
        if smooth_eps > 0:
            e2 = smooth_eps * smooth_eps
            return de.sum(de.add(de.sqrt(de.square(dx), e2), de.sqrt(de.square(dy), e2)))
        return de.sum(de.add(de.abs(dx), de.abs(dy)))
    if variant == "isotropic":
        return de.sum(de.sqrt(de.add(de.square(dx), de.square(dy)), smooth_eps * smooth_eps))
    raise ValueError(f"unknown tv variant {variant!r}")


def data_fidelity(y, op, mu) -> Tensor:
    """||y - A mu||^2 summed over all leading dimensions."""
    mu = _tensor(mu)
    y = np.asarray(y.data if isinstance(y, Tensor) else y)
    op_d = op.astype(mu.dtype)
    a_mu = de.linear_map(mu, op_d.forward, op_d.adjoint)
    if a_mu.shape != y.shape:
        raise ValueError(f"sinogram shape {y.shape} does not match A(mu) shape {a_mu.shape}")
    return de.sum(de.square(de.sub(y.astype(mu.dtype), a_mu)))


def hutchinson_weights(op, rng: np.random.Generator, S: int) -> np.ndarray:
    """(1/S) sum_s (A^T v_s)^2 with Rademacher probes v_s, as an image."""
    if S < 1:
        raise ValueError("S must be >= 1")
    v = rng.integers(0, 2, size=(S, *op.sino_shape)).astype(np.float64) * 2 - 1
    w = op.adjoint(v)
    return (w * w).mean(axis=0)


def trace_term(op, var_diag, rng: Optional[np.random.Generator] = None, S: int = 10,
               mode: str = "hutchinson", max_pixels: int = EXACT_TRACE_MAX_PIXELS) -> Tensor:
    """Estimate trace(A diag(var) A^T) = sum_j var_j ||A e_j||^2.

    ``var_diag`` may carry leading batch dimensions; the result sums over them.
    """
    var = _tensor(var_diag)
    if mode == "hutchinson":
        if rng is None:
            raise ValueError("hutchinson mode needs an rng")
        weights = hutchinson_weights(op, rng, S)
    elif mode == "exact":
        npix = int(np.prod(op.image_shape))
        if npix > max_pixels:
            raise ValueError(f"exact trace limited to {max_pixels} pixels, operator has {npix}")
        weights = op.column_norms_sq()
    else:
        raise ValueError(f"unknown trace mode {mode!r}")
    return de.sum(de.mul(var, weights.astype(var.dtype)))


def _zero(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def supervised_loss(params: NetworkParams, batch, op, hyper: HyperParams, noise: Callable,
                    reset_noise: Optional[Callable] = None) -> LossBreakdown:
    """Negative ELBO on a batch ``(x_true, y, x0)`` of stacked arrays.

    The NLL is summed over the batch and averaged over ``train_mc_samples``
    draws; the KL to a standard normal prior is weighted by ``beta``.
    """
    x_true, y, x0 = batch
    x_true = np.asarray(x_true, dtype=params.dtype)
    if x_true.ndim == 2:
        x_true, y, x0 = x_true[None], np.asarray(y)[None], np.asarray(x0)[None]
    if len(x_true) == 0:
        raise ValueError("empty batch")
    nll = None
    for _ in range(hyper.train_mc_samples):
        if reset_noise is not None:
            reset_noise()
        out, _ = unrolled_forward(params, y, op, x0, mode="sample", noise=noise)
        term = hetero_nll(x_true[:, None], out.mu, variance_from_head(out.sigma_raw))
        nll = term if nll is None else de.add(nll, term)
    nll = de.scale(nll, 1.0 / hyper.train_mc_samples)
    kl = de.scale(encoder_kl(params), hyper.beta) if hyper.beta > 0 else _zero(params.dtype)
    zero = _zero(params.dtype)
    return LossBreakdown(nll, zero, zero, kl, de.add(nll, kl))


def ukt_loss(params: NetworkParams, y, x0, op, prior: Optional[PosteriorSnapshot], hyper: HyperParams,
             noise: Callable, rng: np.random.Generator, reset_noise: Optional[Callable] = None) -> LossBreakdown:
    """Unsupervised objective: fidelity + trace + gamma*TV + beta*KL(q || prior).

    Expectations over the weight posterior use ``train_mc_samples`` draws.
    """
    if prior is None:
        raise ValueError("adaptation needs the phase-1 posterior snapshot as prior")
    y = np.asarray(y)
    if y.ndim == 2:
        y, x0 = y[None], np.asarray(x0)[None]
    n = hyper.train_mc_samples
    fid = tr = tv = None
    for _ in range(n):
        if reset_noise is not None:
            reset_noise()
        out, _ = unrolled_forward(params, y, op, x0, mode="sample", noise=noise)
        f = data_fidelity(y[:, None], op, out.mu)
        t = trace_term(op, variance_from_head(out.sigma_raw), rng, hyper.hutchinson_samples, hyper.trace_mode)
        fid = f if fid is None else de.add(fid, f)
        tr = t if tr is None else de.add(tr, t)
        if hyper.gamma > 0:
            v = tv_seminorm(out.mu, hyper.tv_variant, hyper.tv_smooth_eps)
            tv = v if tv is None else de.add(tv, v)
    fid, tr = de.scale(fid, 1.0 / n), de.scale(tr, 1.0 / n)
    tv = de.scale(tv, hyper.gamma / n) if tv is not None else _zero(params.dtype)
    kl = de.scale(encoder_kl(params, prior), hyper.beta) if hyper.beta > 0 else _zero(params.dtype)
    total = de.add(de.add(fid, tr), de.add(tv, kl))
    return LossBreakdown(fid, tr, tv, kl, total)
