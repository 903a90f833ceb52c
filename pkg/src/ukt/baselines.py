"""Classical reference reconstructions: clamped FBP and isotropic-TV Chambolle-Pock."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .operators import ProjectionOperator, fbp

ALPHA_GRID = (1e-3, 3e-3, 1e-2, 3e-2, 1e-1)


class DivergenceError(RuntimeError):
    pass


def fbp_reconstruct(y, op: ProjectionOperator, cutoff: float = 0.6) -> np.ndarray:
    return np.maximum(fbp(op, y, "hann", cutoff), 0.0)


def grad2d(x: np.ndarray) -> np.ndarray:
    """Forward differences with a zero last row/column; shape (2, H, W)."""
    g = np.zeros((2, *x.shape))
    g[0, :-1, :] = x[1:, :] - x[:-1, :]
    g[1, :, :-1] = x[:, 1:] - x[:, :-1]
    return g


def grad2d_adjoint(p: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`grad2d` (minus the discrete divergence)."""
    out = np.zeros(p.shape[1:])
    out[:-1, :] -= p[0, :-1, :]
    out[1:, :] += p[0, :-1, :]
    out[:, :-1] -= p[1, :, :-1]
    out[:, 1:] += p[1, :, :-1]
    return out


def tv_iso(x) -> float:
    g = grad2d(np.asarray(x, dtype=np.float64))
    return float(np.sqrt(g[0] ** 2 + g[1] ** 2).sum())


def tv_objective(x, y, op: ProjectionOperator, alpha: float) -> float:
    r = op.forward(x) - y
    return 0.5 * float(np.sum(r * r)) + alpha * tv_iso(x)


def stacked_norm(op: ProjectionOperator, iters: int = 100, seed: int = 0) -> float:
    """Power-iteration estimate of ||[A; grad]||."""
    x = np.random.default_rng(seed).standard_normal(op.image_shape)
    lam = 0.0
    for _ in range(iters):
        x /= np.linalg.norm(x)
        z = op.adjoint(op.forward(x)) + grad2d_adjoint(grad2d(x))
        lam = float(np.vdot(x, z))
        x = z
    return float(np.sqrt(lam))


@dataclass(frozen=True)
class TvConfig:
    alpha: float = 1e-2
    iters: int = 500
    theta: float = 1.0
    norm_margin: float = 1.05
    divergence_window: int = 50

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if not 0 <= self.theta <= 1:
            raise ValueError("theta must lie in [0, 1]")
        if not self.norm_margin >= 1:
            raise ValueError("norm_margin must be >= 1")


@dataclass
class TvResult:
    image: np.ndarray
    objective: float
    init_objective: float
    history: list = field(default_factory=list)
    raw_history: list = field(default_factory=list)
    step: float = 0.0


def tv_reconstruct(y, op: ProjectionOperator, cfg: TvConfig = TvConfig(), x0=None,
                   op_norm: float | None = None) -> TvResult:
    """Approximate argmin_{x >= 0} 0.5||Ax - y||^2 + alpha TV(x).

    Chambolle-Pock iterations start from the clamped FBP. The primal-dual
    sequence itself is not a descent sequence, so the solver also tracks the
    best primal point seen so far; that monotone sequence is what ``history``
    records and what is returned. ``raw_history`` holds the objective of every
    primal-dual iterate and drives the divergence check: ``divergence_window``
    consecutive rises while above twice the starting objective, or a
    non-finite value. Smaller excursions are ordinary primal-dual
    oscillation, which can overshoot the start for a few dozen steps.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != tuple(op.sino_shape):
        raise ValueError(f"sinogram shape {y.shape} does not match geometry {op.sino_shape}")
    L = stacked_norm(op) if op_norm is None else op_norm
    tau = sigma = 1.0 / (cfg.norm_margin * L)
    x = fbp_reconstruct(y, op) if x0 is None else np.maximum(np.asarray(x0, dtype=np.float64), 0)
    best, f_best = x.copy(), tv_objective(x, y, op, cfg.alpha)
    x_bar = x.copy()
    p = np.zeros_like(y)
    q = np.zeros((2, *x.shape))
    history, raw = [f_best], [f_best]
    rising = 0
    for _ in range(cfg.iters):
        p = (p + sigma * (op.forward(x_bar) - y)) / (1 + sigma)
        q = q + sigma * grad2d(x_bar)
        q /= np.maximum(1.0, np.sqrt(q[0] ** 2 + q[1] ** 2) / cfg.alpha)
        x_new = np.maximum(x - tau * (op.adjoint(p) + grad2d_adjoint(q)), 0.0)
        x_bar = x_new + cfg.theta * (x_new - x)
        x = x_new
        f = tv_objective(x, y, op, cfg.alpha)
        rising = rising + 1 if f > raw[-1] and f > 2 * raw[0] else 0
        raw.append(f)
        if rising >= cfg.divergence_window or not np.isfinite(f):
            what = f"rose for {rising} consecutive steps" if np.isfinite(f) else "became non-finite"
            raise DivergenceError(f"objective {what} (sigma = tau = {tau:.3e}, alpha = {cfg.alpha:g})")
        if f < f_best:
            best, f_best = x.copy(), f
        history.append(f_best)
    return TvResult(best, f_best, history[0], history, raw, tau)


def alpha_scale(y, op: ProjectionOperator, op_norm: float | None = None) -> float:
    """Data magnitude for the alpha grid: ||A|| times the peak of the clamped FBP."""
    norm = stacked_norm(op) if op_norm is None else op_norm
    peak = fbp_reconstruct(y, op).max()
    return float(norm * peak) if peak > 0 else float(norm)


def select_alpha(sinograms, truths, op: ProjectionOperator, metric, base: TvConfig = TvConfig(),
                 grid=ALPHA_GRID) -> tuple[float, dict]:
    """Grid search for the alpha maximising the mean of ``metric(x, truth)``."""
    L = stacked_norm(op)
    scale = float(np.mean([alpha_scale(y, op, L) for y in sinograms]))
    scores = {}
    for a in grid:
        cfg = TvConfig(a * scale, base.iters, base.theta, base.norm_margin, base.divergence_window)
        scores[a * scale] = float(np.mean([metric(tv_reconstruct(y, op, cfg, op_norm=L).image, t)
                                           for y, t in zip(sinograms, truths)]))
    best = max(scores, key=scores.get)
    return best, scores
