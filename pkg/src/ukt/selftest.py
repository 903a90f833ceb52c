"""Built-in invariant suites: adjointness, gradients, KL, trace, uncertainty identity.

Every check is deterministic (fixed seeds) and returns a :class:`CheckResult`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .bayesnet import (
    FrozenNoise,
    NetConfig,
    init_network,
    snapshot_posterior,
    with_collapsed_posterior,
)
from .diffengine import Tensor
from .inference import reconstruct
from .losses import GaussianDiag, HyperParams, kl_diag_gauss, supervised_loss, trace_term, ukt_loss
from .operators import Geometry, ImageGrid, build_projector


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.1f} s)"


def _timed(name, fn) -> CheckResult:
    t = time.perf_counter()
    passed, detail = fn()
    return CheckResult(name, bool(passed), detail, time.perf_counter() - t)


ADJOINT_GEOMETRIES = {
    "parallel-16": (ImageGrid(16, 16, 1.0), Geometry("parallel", 12, 24, 1.0)),
    "parallel-rect": (ImageGrid(12, 20, 0.7), Geometry("parallel", 9, 31, 0.6)),
    "fan-16": (ImageGrid(16, 16, 1.0), Geometry("fan", 12, 32, 1.5, 40.0, 40.0)),
    "fan-desk": (ImageGrid(64, 64, 1.0), Geometry("fan", 120, 128, 1.5, 500.0, 500.0)),
    "fan-sparse": (ImageGrid(64, 64, 1.0), Geometry("fan", 30, 128, 1.5, 500.0, 500.0)),
}


def check_adjoint(pairs: int = 20, tol: float = 1e-10) -> CheckResult:
    def run():
        worst = 0.0
        for name, (grid, geo) in ADJOINT_GEOMETRIES.items():
            op = build_projector(grid, geo)
            rng = np.random.default_rng(0)
            for _ in range(pairs):
                x = rng.standard_normal(op.image_shape)
                y = rng.standard_normal(op.sino_shape)
                ax = op.forward(x)
                err = abs(np.vdot(ax, y) - np.vdot(x, op.adjoint(y))) / (np.linalg.norm(ax) * np.linalg.norm(y))
                worst = max(worst, err)
        return worst < tol, f"max normalised adjoint gap {worst:.2e} over {len(ADJOINT_GEOMETRIES)} geometries"

    return _timed("adjoint", run)


def _loss_problem():
    op = build_projector(ImageGrid(16, 16, 1.0), Geometry("fan", 12, 32, 1.5, 40.0, 40.0))
    rng = np.random.default_rng(0)
    x = rng.random((2, 16, 16)) + 0.5
    y = op.forward(x) + rng.normal(0, 0.05, (2, *op.sino_shape))
    x0 = x + rng.normal(0, 0.05, x.shape)
    return op, x, y, x0


def full_loss_gradient_errors(seed: int = 0) -> dict:
    """Finite-difference check of both assembled losses on probe tensors (float64, frozen noise)."""
    op, x, y, x0 = _loss_problem()
    cfg = NetConfig(c1=4, c2=8, groups=2, K=2, grad_scale=1e-2)
    params = init_network(cfg, np.random.default_rng(seed), dtype=np.float64)
    prior = snapshot_posterior(init_network(cfg, np.random.default_rng(seed + 7), dtype=np.float64))
    noise = FrozenNoise(seed + 5)
    errs = {}

    def sup(*_):
        return supervised_loss(params, (x, y, x0), op, HyperParams(beta=1e-2), noise, noise.reset).total

    hyper = HyperParams(beta=1e-2, gamma=1e-2, tv_smooth_eps=1e-2)

    def ukt(*_):
        return ukt_loss(params, y[:1], x0[:1], op, prior, hyper, noise, np.random.default_rng(3),
                        noise.reset).total

    # h = 1e-5 straddles a leaky-ReLU kink in this network; 1e-6 keeps every probe on one side
    h = 1e-6
    errs["supervised"] = max(de.compare(sup, [t], h=h) for t in (params.encoder[1].w_mean, params.encoder[2].w_rho))
    errs["ukt"] = max(de.compare(ukt, [t], h=h) for t in (params.encoder[0].w_mean, params.heads["sigma"][2].w))
    return errs


def check_gradients(seeds=range(3), op_tol: float = 1e-4, loss_tol: float = 1e-3) -> CheckResult:
    def run():
        worst_op = max(de.gradcheck(name, s)["max_rel_err"] for name in de.OPS for s in seeds)
        loss_errs = full_loss_gradient_errors()
        worst_loss = max(loss_errs.values())
        ok = worst_op <= op_tol and worst_loss <= loss_tol
        return ok, (f"ops max rel err {worst_op:.1e} over {len(de.OPS)} ops; "
                    f"losses {', '.join(f'{k} {v:.1e}' for k, v in loss_errs.items())}")

    return _timed("gradients", run)


def kl_monte_carlo(instances: int = 10, n: int = 100_000, dim: int = 10, seed: int = 42) -> list:
    """(closed form, MC mean, MC standard error) per random instance."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(instances):
        mq, mp = rng.standard_normal(dim), rng.standard_normal(dim)
        sq, sp = rng.uniform(0.3, 2.0, dim), rng.uniform(0.3, 2.0, dim)
        closed = float(kl_diag_gauss(GaussianDiag(mq, sq), GaussianDiag(mp, sp)).data)
        z = mq + sq * rng.standard_normal((n, dim))
        terms = (-0.5 * ((z - mq) / sq) ** 2 - np.log(sq) + 0.5 * ((z - mp) / sp) ** 2 + np.log(sp)).sum(axis=1)
        out.append((closed, float(terms.mean()), float(terms.std(ddof=1) / np.sqrt(n))))
    return out


def check_kl() -> CheckResult:
    def run():
        rows = kl_monte_carlo()
        worst = max(abs(c - m) / se for c, m, se in rows)
        rng = np.random.default_rng(1)
        m, s = rng.standard_normal(50), rng.uniform(0.1, 2, 50)
        self_kl = float(kl_diag_gauss(GaussianDiag(m, s), GaussianDiag(m.copy(), s.copy())).data)
        return worst < 3 and self_kl == 0.0, f"max |closed - MC| = {worst:.2f} SE; KL(q||q) = {self_kl!r}"

    return _timed("kl", run)


def trace_relative_deviation(estimates: int = 1000, S: int = 10, seed: int = 0) -> float:
    op = build_projector(ImageGrid(8, 8, 1.0), Geometry("fan", 10, 16, 1.5, 20.0, 20.0))
    rng = np.random.default_rng(seed)
    var = rng.uniform(0.5, 2.0, (8, 8))
    exact = float(trace_term(op, var, mode="exact").data)
    est = np.mean([float(trace_term(op, var, rng, S).data) for _ in range(estimates)])
    return abs(est - exact) / exact


def check_trace(tol: float = 0.01) -> CheckResult:
    def run():
        dev = trace_relative_deviation()
        return dev <= tol, f"mean of 1000 estimates deviates {100 * dev:.2f}% from the exact trace"

    return _timed("trace", run)


def stub_moment_errors(T: int = 10_000, seed: int = 0) -> dict:
    """Largest |estimate - truth| / SE of the decomposition on a Gaussian stub network."""
    rng = np.random.default_rng(seed)
    center = rng.uniform(0, 1, (4, 4))
    spread = rng.uniform(0.05, 0.3, (4, 4))
    ale_base = rng.uniform(0.01, 0.1, (4, 4))

    def draw(r):
        mu = center + spread * r.standard_normal((4, 4))
        var = ale_base * r.uniform(0.5, 1.5, (4, 4))
        return mu, var

    res = reconstruct(None, None, None, T, np.random.default_rng(seed + 1), sampler=draw)
    true_epi, true_ale = spread**2, ale_base
    # SE of the 1/T sample variance of Gaussian draws, and of a uniform mean
    se_epi = true_epi * np.sqrt(2.0 / (T - 1))
    se_ale = ale_base * np.sqrt(1.0 / 12.0) / np.sqrt(T)
    return {"epistemic": float(np.max(np.abs(res.epistemic - true_epi) / se_epi)),
            "aleatoric": float(np.max(np.abs(res.aleatoric - true_ale) / se_ale))}


def collapsed_epistemic_max(seed: int = 0, T: int = 10) -> tuple[float, bool]:
    """Max epistemic variance of a float32 network with all encoder scales at 1e-12."""
    op = build_projector(ImageGrid(16, 16, 1.0), Geometry("fan", 12, 32, 1.5, 40.0, 40.0))
    cfg = NetConfig(c1=4, c2=8, groups=2, K=2, grad_scale=1e-2)
    params = with_collapsed_posterior(init_network(cfg, np.random.default_rng(seed)), 1e-12)
    rng = np.random.default_rng(seed)
    x = rng.random((16, 16))
    res = reconstruct(params, op.forward(x), op, T, np.random.default_rng(seed + 1))
    exact = bool(np.array_equal(res.total, res.aleatoric + res.epistemic))
    return float(np.abs(res.epistemic).max()), exact


def check_uncertainty() -> CheckResult:
    def run():
        epi_max, exact = collapsed_epistemic_max()
        z = stub_moment_errors()
        ok = exact and epi_max < 1e-4 and max(z.values()) < 3
        return ok, (f"total identity exact={exact}; collapsed max epistemic {epi_max:.1e}; "
                    f"stub max error {z['aleatoric']:.2f} SE (aleatoric), {z['epistemic']:.2f} SE (epistemic)")

    return _timed("uncertainty", run)


SUITES = {
    "adjoint": check_adjoint,
    "gradients": check_gradients,
    "kl": check_kl,
    "trace": check_trace,
    "uncertainty": check_uncertainty,
}


def run_all() -> list[CheckResult]:
    return [fn() for fn in SUITES.values()]
