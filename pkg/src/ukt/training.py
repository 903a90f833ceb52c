"""Optimisation, both training phases, and checkpoint I/O."""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import diffengine as de
from .bayesnet import (
    GaussianNoise,
    NetConfig,
    NetworkParams,
    PosteriorSnapshot,
    from_arrays,
    snapshot_posterior,
)
from .formats import ChecksumError, FormatError, VersionError, atomic_write, decode_tensor, encode_tensor
from .losses import HyperParams, LossBreakdown, supervised_loss, ukt_loss
from .operators import ProjectionOperator, fbp
from .phantoms import DatasetRecord, read_dataset

CHECKPOINT_MAGIC = b"BDCK"
CHECKPOINT_VERSION = 1
FBP_CUTOFF = 0.6


class GeometryMismatch(FormatError):
    pass


# ---------------------------------------------------------------------------
# optimiser and schedule


@dataclass
class OptimState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays, lr: float = 1e-3) -> "OptimState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0, lr)

    def copy(self) -> "OptimState":
        return replace(self, m=[a.copy() for a in self.m], v=[a.copy() for a in self.v])


def _arrays(params):
    if isinstance(params, NetworkParams):
        return [t.data for t in params.tensors()]
    return [p.data if isinstance(p, de.Tensor) else p for p in params]


def adam_step(params, grads, state: OptimState, lr: Optional[float] = None):
    """One bias-corrected Adam update, applied in place.

    ``params`` is a NetworkParams or a list of arrays/Tensors; ``grads`` is a
    matching list where ``None`` means zero. Returns ``(params, state)``.
    """
    arrays = _arrays(params)
    if len(grads) != len(arrays) or len(state.m) != len(arrays):
        raise ValueError(f"{len(grads)} gradients for {len(arrays)} parameters")
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(arrays, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        g = g.astype(p.dtype, copy=False)
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        # -inf scales stay collapsed
        p -= np.where(np.isfinite(p), step, 0).astype(p.dtype)
    return params, state


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / total_steps))


def clip_grad_norm(grads: list, max_norm: float) -> tuple[list, float]:
    """Scale gradients so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads if g is not None))
    if max_norm <= 0 or total <= max_norm:
        return grads, total
    s = max_norm / total
    return [None if g is None else g * g.dtype.type(s) for g in grads], total


# ---------------------------------------------------------------------------
# configuration and checkpoints


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    seed: int = 0
    hyper: HyperParams = field(default_factory=HyperParams)
    phase: str = "supervised"
    ukt_steps: int = 200
    ukt_lr: float = 1e-4
    ukt_cosine: bool = False
    clip_norm: float = 10.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.lr_max >= self.lr_min > 0:
            raise ValueError("need lr_max >= lr_min > 0")
        if self.phase not in ("supervised", "ukt"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.ukt_steps < 0 or not self.ukt_lr > 0:
            raise ValueError("ukt_steps must be >= 0 and ukt_lr > 0")


def default_beta(n_pixels: int, n_encoder_params: int) -> float:
    return 1e-3 * n_pixels / n_encoder_params


@dataclass
class Checkpoint:
    params: NetworkParams
    geometry_hash: int
    config: dict = field(default_factory=dict)
    prior: Optional[PosteriorSnapshot] = None
    optim: Optional[OptimState] = None
    rng_state: Optional[dict] = None
    step: int = 0
    log_offset: int = 0


def _pack_named(name: str, array) -> bytes:
    key = name.encode()
    return struct.pack("<H", len(key)) + key + encode_tensor(array)


def _unpack_named(buf: bytes, offset: int):
    (n,) = struct.unpack_from("<H", buf, offset)
    name = buf[offset + 2:offset + 2 + n].decode()
    array, offset = decode_tensor(buf, offset + 2 + n)
    return name, array, offset


def encode_checkpoint(c: Checkpoint) -> bytes:
    names = [n for n, _ in c.params.named_tensors()]
    meta = {
        "net": asdict(c.params.config),
        "geometry_hash": int(c.geometry_hash),
        "step": int(c.step),
        "log_offset": int(c.log_offset),
        "rng_state": c.rng_state,
        "names": names,
        "prior_names": list(c.prior.names) if c.prior is not None else None,
        "optim": None if c.optim is None else {
            "step": c.optim.step, "lr": c.optim.lr, "beta1": c.optim.beta1,
            "beta2": c.optim.beta2, "eps": c.optim.eps},
    }
    config = "".join(f"{k}={c.config[k]}\n" for k in sorted(c.config)).encode()
    meta_b = json.dumps(meta, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<I", len(config)), config, struct.pack("<I", len(meta_b)), meta_b]
    for name, t in c.params.named_tensors():
        parts.append(_pack_named(name, t.data))
    if c.prior is not None:
        for name, m, s in zip(c.prior.names, c.prior.means, c.prior.sigmas):
            parts += [_pack_named(f"prior.{name}.mean", m), _pack_named(f"prior.{name}.sigma", s)]
    if c.optim is not None:
        for name, m, v in zip(names, c.optim.m, c.optim.v):
            parts += [_pack_named(f"adam.{name}.m", m), _pack_named(f"adam.{name}.v", v)]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 12 or buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint checksum mismatch (file truncated or corrupt)")
    (n_cfg,) = struct.unpack_from("<I", body, 8)
    config_text = body[12:12 + n_cfg].decode()
    off = 12 + n_cfg
    (n_meta,) = struct.unpack_from("<I", body, off)
    meta = json.loads(body[off + 4:off + 4 + n_meta])
    off += 4 + n_meta
    tensors = {}
    while off < len(body):
        name, array, off = _unpack_named(body, off)
        tensors[name] = array
    config = dict(line.split("=", 1) for line in config_text.splitlines() if line)
    net = NetConfig(**meta["net"])
    params = from_arrays(net, {n: tensors[n] for n in meta["names"]})
    prior = None
    if meta["prior_names"] is not None:
        pn = meta["prior_names"]
        prior = PosteriorSnapshot(tuple(tensors[f"prior.{n}.mean"] for n in pn),
                                  tuple(tensors[f"prior.{n}.sigma"] for n in pn), tuple(pn))
    optim = None
    if meta["optim"] is not None:
        o = meta["optim"]
        optim = OptimState([tensors[f"adam.{n}.m"] for n in meta["names"]],
                           [tensors[f"adam.{n}.v"] for n in meta["names"]],
                           o["step"], o["lr"], o["beta1"], o["beta2"], o["eps"])
    return Checkpoint(params, meta["geometry_hash"], config, prior, optim, meta["rng_state"],
                      meta["step"], meta["log_offset"])


def save_checkpoint(c: Checkpoint, path) -> None:
    atomic_write(path, encode_checkpoint(c))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# training loops


class TrainingLog:
    """Append-only ``key=value`` lines, one per optimiser step."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.lines: list[str] = []

    def write(self, **fields) -> None:
        line = " ".join(f"{k}={_fmt(v)}" for k, v in fields.items())
        self.lines.append(line)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    @property
    def offset(self) -> int:
        return self.path.stat().st_size if self.path is not None and self.path.exists() else 0


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def parse_log(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        row = {}
        for item in line.split():
            k, v = item.split("=", 1)
            try:
                row[k] = int(v)
            except ValueError:
                try:
                    row[k] = float(v)
                except ValueError:
                    row[k] = v
        rows.append(row)
    return rows


def initial_estimate(op: ProjectionOperator, y) -> np.ndarray:
    """Hann-filtered FBP (cutoff 0.6) of one or more sinograms."""
    y = np.asarray(y)
    if y.ndim == 2:
        return fbp(op, y, "hann", FBP_CUTOFF)
    return np.stack([fbp(op, s, "hann", FBP_CUTOFF) for s in y])


def _gradient_step(params: NetworkParams, loss_fn, optim: OptimState, lr: float, clip: float) -> LossBreakdown:
    params.set_requires_grad(True)
    with de.Tape():
        parts = loss_fn()
    de.backward(parts.total)
    grads = [t.grad for t in params.tensors()]
    grads, _ = clip_grad_norm(grads, clip)
    adam_step(params, grads, optim, lr)
    params.set_requires_grad(False)
    return parts


def _load_records(dataset, strip: bool = False) -> list[DatasetRecord]:
    if isinstance(dataset, (str, Path)):
        _, records = read_dataset(dataset, strip_ground_truth=strip)
        return records
    records = list(dataset)
    if strip:
        records = [replace(r, ground_truth=None) for r in records]
    return records


def _check_geometry(records, op: ProjectionOperator) -> None:
    for r in records:
        if r.geometry_hash != op.hash:
            raise GeometryMismatch(
                f"data geometry hash {r.geometry_hash:#x} does not match operator hash {op.hash:#x}")


def train_supervised(dataset, config: TrainConfig, op: ProjectionOperator, net: NetworkParams,
                     out_path=None, log_path=None, resume: Optional[Checkpoint] = None,
                     config_echo: Optional[dict] = None, max_steps: Optional[int] = None) -> Checkpoint:
    """Phase-1 training on (ground truth, sinogram) pairs.

    ``dataset`` is a dataset path or a list of records. ``net`` supplies the
    initial parameters unless ``resume`` is given. ``max_steps`` stops early
    (the schedule still spans the full run) so a run can be split and resumed.
    """
    records = _load_records(dataset)
    if not records:
        raise ValueError("dataset is empty")
    if any(r.ground_truth is None for r in records):
        raise ValueError("supervised training needs ground truth in every record")
    _check_geometry(records, op)
    x_true = np.stack([r.ground_truth for r in records])
    y = np.stack([r.sinogram for r in records])
    x0 = np.stack([r.fbp_init for r in records])
    n = len(records)
    per_epoch = math.ceil(n / config.batch_size)
    total = config.epochs * per_epoch
    hyper = config.hyper

    if resume is not None:
        params, optim, start = resume.params, resume.optim, resume.step
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
    else:
        params, start = net.copy(), 0
        optim = OptimState.zeros_like(_arrays(params), config.lr_max)
        rng = np.random.default_rng([config.seed, 1])
    noise = GaussianNoise(rng)
    log = TrainingLog(log_path)
    stop = total if max_steps is None else min(total, start + max_steps)

    order = None
    for step in range(start, stop):
        epoch, k = divmod(step, per_epoch)
        if order is None or k == 0:
            order = np.random.default_rng([config.seed, 0, epoch]).permutation(n)
        idx = np.sort(order[k * config.batch_size:(k + 1) * config.batch_size])
        lr = cosine_lr(step, total, config.lr_max, config.lr_min)
        parts = _gradient_step(
            params, lambda: supervised_loss(params, (x_true[idx], y[idx], x0[idx]), op, hyper, noise),
            optim, lr, config.clip_norm)
        log.write(step=step, lr=lr, **parts.as_floats())

    ckpt = Checkpoint(params, op.hash, dict(config_echo or {}),
                      snapshot_posterior(params), optim, rng.bit_generator.state, stop, log.offset)
    if out_path is not None:
        save_checkpoint(ckpt, out_path)
    return ckpt


@dataclass
class AdaptResult:
    checkpoints: list
    logs: list  # per measurement (or one for batch mode): list of breakdown dicts


def ukt_adapt(ckpt: Checkpoint, measurements, config: TrainConfig, op: ProjectionOperator,
              out_dir=None, log_path=None, batch_mode: bool = False,
              config_echo: Optional[dict] = None) -> AdaptResult:
    """Phase-2 adaptation on measurements only; ground truth is stripped on load.

    Each logged row holds the loss evaluated before that step's update; one
    extra row at ``step == ukt_steps`` records the loss of the final weights.
    """
    if ckpt.prior is None:
        raise ValueError("checkpoint has no prior snapshot; run supervised training first")
    records = _load_records(measurements, strip=True)
    if not records:
        raise ValueError("no measurements to adapt on")
    hyper = config.hyper
    _check_geometry(records, op)
    y_all = np.stack([r.sinogram for r in records])
    x0_all = np.stack([r.fbp_init for r in records])
    groups = [np.arange(len(records))] if batch_mode else [np.array([i]) for i in range(len(records))]
    log = TrainingLog(log_path)
    ghash = op.hash
    out_ckpts, out_logs = [], []

    for gi, idx in enumerate(groups):
        params = ckpt.params.copy()
        optim = OptimState.zeros_like(_arrays(params), config.ukt_lr)
        rng = np.random.default_rng([config.seed, 2, gi])
        noise = GaussianNoise(rng)
        y, x0 = y_all[idx], x0_all[idx]

        def loss():
            return ukt_loss(params, y, x0, op, ckpt.prior, hyper, noise, rng)

        rows = []
        for step in range(config.ukt_steps + 1):
            if step == config.ukt_steps:
                parts = loss()
                lr = 0.0
            else:
                lr = (cosine_lr(step, config.ukt_steps, config.ukt_lr, config.lr_min)
                      if config.ukt_cosine else config.ukt_lr)
                parts = _gradient_step(params, loss, optim, lr, config.clip_norm)
            vals = parts.as_floats()
            rows.append(vals)
            log.write(sample=gi, step=step, lr=lr, **vals)
        c = Checkpoint(params, ghash, dict(config_echo or {}), ckpt.prior, optim,
                       rng.bit_generator.state, config.ukt_steps, log.offset)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(c, Path(out_dir) / f"adapted_{gi:04d}.bdck")
        out_ckpts.append(c)
        out_logs.append(rows)
    return AdaptResult(out_ckpts, out_logs)
