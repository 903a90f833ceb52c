"""Monte-Carlo reconstruction, uncertainty decomposition, and image metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .bayesnet import GaussianNoise, NetworkParams, unrolled_forward, variance_from_head
from .training import Checkpoint, GeometryMismatch, initial_estimate

PSNR_CAP = 99.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5


@dataclass
class ReconResult:
    mean: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray
    total: np.ndarray
    samples_used: int
    per_sample_means: Optional[np.ndarray] = None


def decompose(mus: np.ndarray, variances: np.ndarray, keep_samples: bool = False) -> ReconResult:
    """Law-of-total-variance split of T predictive draws stacked on axis 0.

    The epistemic part is the (biased, 1/T) sample variance of the means,
    computed in two passes so identical draws give exactly zero.
    """
    mus = np.asarray(mus, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if mus.shape != variances.shape or mus.ndim < 1 or len(mus) < 1:
        raise ValueError(f"need matching (T, ...) stacks, got {mus.shape} and {variances.shape}")
    mean = mus.mean(axis=0)
    epistemic = np.maximum(np.mean((mus - mean) ** 2, axis=0), 0.0)
    aleatoric = variances.mean(axis=0)
    return ReconResult(mean, aleatoric, epistemic, aleatoric + epistemic, len(mus),
                       mus if keep_samples else None)


def network_sampler(params: NetworkParams, op, y, x0=None) -> Callable:
    """Returns ``draw(rng) -> (mu, var)`` for one sample-mode forward."""
    x0 = initial_estimate(op, y) if x0 is None else x0

    def draw(rng):
        out, _ = unrolled_forward(params, y, op, x0, mode="sample", noise=GaussianNoise(rng))
        return out.mu.data[0, 0], variance_from_head(out.sigma_raw.data[0, 0])

    return draw


def reconstruct(model, y, op, T: int = 10, rng: Optional[np.random.Generator] = None,
                x0=None, keep_samples: bool = False, sampler: Optional[Callable] = None) -> ReconResult:
    """Mean and uncertainty maps from ``T`` independent sample-mode forwards.

    ``model`` is a Checkpoint or NetworkParams; ``sampler`` replaces the
    network with any ``draw(rng) -> (mu, var)`` callable. Draw ``t`` uses the
    child generator ``t`` of ``rng``, so results do not depend on scheduling.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    if sampler is None:
        params = model
        if isinstance(model, Checkpoint):
            if model.geometry_hash != op.hash:
                raise GeometryMismatch(f"checkpoint geometry hash {model.geometry_hash:#x} does not match "
                                       f"measurement geometry hash {op.hash:#x}")
            params = model.params
        y = np.asarray(y)
        if y.shape != tuple(op.sino_shape):
            raise GeometryMismatch(f"sinogram shape {y.shape} does not match geometry {op.sino_shape}")
        sampler = network_sampler(params, op, y, x0)
    draws = [sampler(child) for child in rng.spawn(T)]
    return decompose(np.stack([d[0] for d in draws]), np.stack([d[1] for d in draws]), keep_samples)


def normalize_minmax(image) -> np.ndarray:
    """Affine map to [0, 1]; constant images map to zeros."""
    a = np.asarray(image, dtype=np.float64)
    lo, hi = a.min(), a.max()
    return np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)


def _check_pair(x, ref, data_range):
    x, ref = np.asarray(x, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    return x, ref


def data_range_of(ref) -> float:
    ref = np.asarray(ref)
    return float(ref.max() - ref.min())


def psnr(x, ref, data_range: float) -> float:
    x, ref = _check_pair(x, ref, data_range)
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * np.log10(data_range**2 / mse))


def _gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(x, ref, data_range: float) -> float:
    """Mean SSIM over all fully-covered 11x11 Gaussian windows (sigma 1.5)."""
    x, ref = _check_pair(x, ref, data_range)
    if x.ndim != 2 or min(x.shape) < SSIM_WIN:
        raise ValueError(f"ssim needs 2-D images of at least {SSIM_WIN}x{SSIM_WIN}, got {x.shape}")
    g = _gaussian_window()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(ref, g)
    vx = _filter_valid(x * x, g) - mx * mx
    vy = _filter_valid(ref * ref, g) - my * my
    cxy = _filter_valid(x * ref, g) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())
