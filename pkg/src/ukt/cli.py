"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .config import Config, help_text, make_net_config, make_noise, make_operator, make_train_config

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class NumericalError(ArithmeticError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="key=value configuration file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--threads", type=int, default=1, help="1 = strict deterministic mode")
    p.add_argument("--record-time", action="store_true", help="write measured wall_ms instead of 0")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ukt", description="Bayesian unrolled CT reconstruction with unsupervised adaptation.",
                     epilog="configuration keys (key default description):\n" + help_text(),
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = [_common()]

    p = sub.add_parser("gen-data", parents=common, help="simulate a dataset")
    p.add_argument("--kind", choices=("supervised-ellipses", "unsupervised-ood"), default="supervised-ellipses")
    p.add_argument("--count", type=int, help="records (default: data.train_size or data.ood_size)")
    p.add_argument("--name", help="output file stem (default: the kind)")

    p = sub.add_parser("train", parents=common, help="phase-1 supervised training")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--resume", type=Path)
    p.add_argument("--name", default="phase1")

    p = sub.add_parser("adapt", parents=common, help="phase-2 unsupervised adaptation")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--batch", action="store_true", help="one adaptation over all measurements")

    p = sub.add_parser("reconstruct", parents=common, help="Monte-Carlo reconstruction with uncertainty maps")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint file or directory of adapted ones")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ref", type=Path, help="ground-truth stack for metrics (optional)")
    p.add_argument("--T", type=int)
    p.add_argument("--method", help="label in the metrics file")

    p = sub.add_parser("baseline", parents=common, help="FBP or TV reconstruction")
    p.add_argument("--method", choices=("fbp", "tv"), required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ref", type=Path)
    p.add_argument("--alpha", type=float, help="TV weight (overrides tv.alpha)")
    p.add_argument("--select-from", type=Path, help="dataset with ground truth for the alpha grid search")

    p = sub.add_parser("eval", parents=common, help="PSNR/SSIM of predictions against references")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--range", default="auto", help="'auto' (per-image max - min of ref) or a number")
    p.add_argument("--method", default="eval")

    sub.add_parser("selftest", parents=common, help="run the invariant suites")
    return parser


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> Config:
    return Config.load(args.config) if args.config else Config()


def _stack(a) -> np.ndarray:
    a = np.asarray(a)
    return a[None] if a.ndim == 2 else a


def _references(args, records):
    if getattr(args, "ref", None) is not None:
        from .formats import read_tensor

        ref = _stack(read_tensor(args.ref))
        if len(ref) != len(records):
            from .formats import FormatError

            raise FormatError(f"{args.ref}: {len(ref)} references for {len(records)} records")
        return ref
    if all(r.ground_truth is not None for r in records):
        return np.stack([r.ground_truth for r in records])
    return None


class _Metrics:
    def __init__(self, args, cfg: Config):
        self.path = args.out / "metrics.csv"
        self.seed, self.hash, self.timed = args.seed, cfg.hash, args.record_time

    def add(self, sample_id, method, pred, ref, wall_ms):
        from .formats import metrics_csv_append
        from .inference import data_range_of, psnr, ssim

        dr = data_range_of(ref)
        if not dr > 0:
            dr = 1.0
        row = {"sample_id": sample_id, "method": method, "psnr_db": psnr(pred, ref, dr),
               "ssim": ssim(pred, ref, dr), "wall_ms": wall_ms if self.timed else 0.0,
               "seed": self.seed, "config_hash": self.hash}
        metrics_csv_append(self.path, row)
        return row


def _write_image(path: Path, image, window=None):
    from .formats import write_image_pgm, write_tensor

    write_tensor(path.with_suffix(".tnsr"), np.asarray(image, dtype=np.float32))
    lo, hi = window if window is not None else (0.0, float(np.max(image)))
    write_image_pgm(image, path.with_suffix(".pgm"), (lo, hi if hi > lo else lo + 1.0))


def _write_stack(path: Path, images):
    from .formats import write_tensor

    write_tensor(path, np.stack(images).astype(np.float32))


def _check_finite(value, what):
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite {what}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg: Config) -> int:
    from .phantoms import generate_dataset

    op = make_operator(cfg)
    count = args.count or (cfg["data.train_size"] if args.kind == "supervised-ellipses" else cfg["data.ood_size"])
    name = args.name or args.kind
    ref = args.out / f"{name}.ref.tnsr" if args.kind == "unsupervised-ood" else None
    generate_dataset(args.kind, count, op, make_noise(cfg), args.seed, args.out / f"{name}.bdgd",
                     threads=args.threads, min_count=cfg["data.min_ellipses"], max_count=cfg["data.max_ellipses"],
                     reference_path=ref)
    print(f"wrote {count} records to {args.out / f'{name}.bdgd'}")
    return EXIT_OK


def cmd_train(args, cfg: Config) -> int:
    from .bayesnet import init_network
    from .training import load_checkpoint, train_supervised

    op = make_operator(cfg)
    resume = load_checkpoint(args.resume) if args.resume else None
    net_cfg = resume.params.config if resume else make_net_config(cfg, op)
    params = init_network(net_cfg, np.random.default_rng([args.seed, 3]))
    tc = make_train_config(cfg, "supervised", args.seed, op.grid.size, params.encoder_parameter_count())
    ckpt = train_supervised(args.data, tc, op, params, args.out / f"{args.name}.bdck", args.out / "train.log",
                            resume=resume, config_echo=cfg.echo())
    print(f"trained {ckpt.step} steps; checkpoint {args.out / f'{args.name}.bdck'}")
    return EXIT_OK


def cmd_adapt(args, cfg: Config) -> int:
    from .training import load_checkpoint, ukt_adapt

    op = make_operator(cfg)
    ckpt = load_checkpoint(args.checkpoint)
    _match_geometry(ckpt, op)
    tc = make_train_config(cfg, "ukt", args.seed, op.grid.size, ckpt.params.encoder_parameter_count())
    res = ukt_adapt(ckpt, args.data, tc, op, args.out / "adapted", args.out / "adapt.log",
                    batch_mode=args.batch or cfg["ukt.batch_mode"], config_echo=cfg.echo())
    for rows in res.logs:
        _check_finite(rows[-1]["total"], "adaptation loss")
    print(f"adapted {len(res.checkpoints)} checkpoint(s) in {args.out / 'adapted'}")
    return EXIT_OK


def _match_geometry(ckpt, op):
    from .training import GeometryMismatch

    if ckpt.geometry_hash != op.hash:
        raise GeometryMismatch(f"checkpoint geometry hash {ckpt.geometry_hash:#018x} does not match "
                               f"configured geometry hash {op.hash:#018x}")


def cmd_reconstruct(args, cfg: Config) -> int:
    from .inference import normalize_minmax, reconstruct
    from .phantoms import read_dataset
    from .training import load_checkpoint

    op = make_operator(cfg)
    _, records = read_dataset(args.data, strip_ground_truth=False)
    ref = _references(args, records)
    if args.checkpoint.is_dir():
        paths = sorted(args.checkpoint.glob("adapted_*.bdck"))
        if len(paths) == 1:
            paths = paths * len(records)
        if len(paths) != len(records):
            from .formats import FormatError

            raise FormatError(f"{len(paths)} adapted checkpoints for {len(records)} records")
        method = args.method or "bdgd+ukt"
    else:
        paths = [args.checkpoint] * len(records)
        method = args.method or "bdgd"
    T = args.T or cfg["infer.T"]
    out = args.out / "recon"
    out.mkdir(parents=True, exist_ok=True)
    metrics = _Metrics(args, cfg)
    cache, means = {}, []
    for i, (rec, path) in enumerate(zip(records, paths)):
        if path not in cache:
            cache = {path: load_checkpoint(path)}
        ckpt = cache[path]
        _match_geometry(ckpt, op)
        t = time.perf_counter()
        res = reconstruct(ckpt, rec.sinogram, op, T, np.random.default_rng([args.seed, i]), x0=rec.fbp_init)
        wall = 1000 * (time.perf_counter() - t)
        _check_finite(res.total, "reconstruction")
        means.append(res.mean)
        window = (0.0, float(ref[i].max())) if ref is not None else None
        _write_image(out / f"{i:04d}_mean", res.mean, window)
        for name in ("aleatoric", "epistemic", "total"):
            _write_image(out / f"{i:04d}_{name}", getattr(res, name))
            _write_image(out / f"{i:04d}_{name}_norm", normalize_minmax(getattr(res, name)), (0.0, 1.0))
        if ref is not None:
            metrics.add(i, method, res.mean, ref[i], wall)
    _write_stack(out / "mean.tnsr", means)
    print(f"reconstructed {len(records)} records into {out}")
    return EXIT_OK


def cmd_baseline(args, cfg: Config) -> int:
    from .baselines import ALPHA_GRID, TvConfig, fbp_reconstruct, select_alpha, stacked_norm, tv_reconstruct
    from .inference import data_range_of, psnr
    from .phantoms import read_dataset

    op = make_operator(cfg)
    _, records = read_dataset(args.data)
    ref = _references(args, records)
    out = args.out / args.method
    out.mkdir(parents=True, exist_ok=True)
    metrics = _Metrics(args, cfg)
    base = TvConfig(iters=cfg["tv.iters"], theta=cfg["tv.theta"], norm_margin=cfg["tv.norm_margin"])
    alpha = args.alpha if args.alpha is not None else cfg["tv.alpha"]
    if args.method == "tv" and alpha == "auto":
        if args.select_from is None:
            raise UsageError("tv.alpha is auto: pass --alpha or --select-from")
        _, sel = read_dataset(args.select_from)
        sel = sel[: cfg["tv.select_count"]]
        if any(r.ground_truth is None for r in sel):
            raise ValueError("--select-from dataset needs ground truth")
        alpha, scores = select_alpha([r.sinogram for r in sel], [r.ground_truth for r in sel], op,
                                     lambda x, t: psnr(x, t, data_range_of(t)), base, ALPHA_GRID)
        print("alpha grid: " + ", ".join(f"{a:.4g}:{s:.3f}dB" for a, s in scores.items()))
    L = stacked_norm(op) if args.method == "tv" else None
    images = []
    for i, rec in enumerate(records):
        t = time.perf_counter()
        if args.method == "fbp":
            img = fbp_reconstruct(rec.sinogram, op, cfg["infer.fbp_cutoff"])
        else:
            cfg_i = TvConfig(alpha, base.iters, base.theta, base.norm_margin)
            img = tv_reconstruct(rec.sinogram, op, cfg_i, op_norm=L).image
        wall = 1000 * (time.perf_counter() - t)
        _check_finite(img, f"{args.method} reconstruction")
        images.append(img)
        window = (0.0, float(ref[i].max())) if ref is not None else None
        _write_image(out / f"{i:04d}", img, window)
        if ref is not None:
            metrics.add(i, args.method, img, ref[i], wall)
    _write_stack(out / "stack.tnsr", images)
    print(f"{args.method}: {len(records)} reconstructions in {out}" + (f" (alpha {alpha:.4g})" if args.method == "tv" else ""))
    return EXIT_OK


def cmd_eval(args, cfg: Config) -> int:
    from .formats import FormatError, read_tensor

    pred, ref = _stack(read_tensor(args.pred)), _stack(read_tensor(args.ref))
    if pred.shape != ref.shape:
        raise FormatError(f"prediction shape {pred.shape} does not match reference shape {ref.shape}")
    metrics = _Metrics(args, cfg)
    if args.range != "auto":
        try:
            fixed = float(args.range)
        except ValueError:
            raise UsageError(f"--range must be 'auto' or a number, got {args.range!r}") from None
    for i, (p, r) in enumerate(zip(pred, ref)):
        if args.range != "auto":
            from .formats import metrics_csv_append
            from .inference import psnr, ssim

            row = {"sample_id": i, "method": args.method, "psnr_db": psnr(p, r, fixed), "ssim": ssim(p, r, fixed),
                   "wall_ms": 0.0, "seed": args.seed, "config_hash": cfg.hash}
            metrics_csv_append(metrics.path, row)
        else:
            row = metrics.add(i, args.method, p, r, 0.0)
        print(f"sample_id={i} psnr={row['psnr_db']:.6f} ssim={row['ssim']:.6f}")
    return EXIT_OK


def cmd_selftest(args, cfg: Config) -> int:
    from .selftest import run_all

    results = run_all()
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "adapt": cmd_adapt, "reconstruct": cmd_reconstruct,
    "baseline": cmd_baseline, "eval": cmd_eval, "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    from .baselines import DivergenceError
    from .formats import FormatError

    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = _config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        with np.errstate(over="ignore", under="ignore"):
            return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, DivergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
