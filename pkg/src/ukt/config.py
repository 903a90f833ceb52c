"""Flat ``key=value`` run configuration and builders for the pipeline objects."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .formats import FormatError


class ConfigError(FormatError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _auto_float(text: str):
    return "auto" if text.strip() == "auto" else float(text)


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return text
    return parse


@dataclass(frozen=True)
class Key:
    default: Any
    parse: Callable
    doc: str
    check: Callable = lambda v: True


def _pos(v):
    return v == "auto" or v > 0


def _nonneg(v):
    return v == "auto" or v >= 0


KEYS: dict[str, Key] = {
    "grid.nx": Key(64, int, "image width in pixels", lambda v: v >= 2),
    "grid.ny": Key(64, int, "image height in pixels", lambda v: v >= 2),
    "grid.pixel_size": Key(1.0, float, "pixel size (mm)", _pos),
    "geometry.beam": Key("fan", _choice("fan", "parallel"), "beam type"),
    "geometry.n_angles": Key(120, int, "projection angles", lambda v: v >= 1),
    "geometry.n_detectors": Key(128, int, "detector bins", lambda v: v >= 1),
    "geometry.detector_spacing": Key(1.5, float, "detector bin width (mm)", _pos),
    "geometry.d_source_axis": Key(500.0, float, "source to rotation axis (mm, fan)", _pos),
    "geometry.d_axis_detector": Key(500.0, float, "rotation axis to detector (mm, fan)", _pos),
    "noise.photons": Key(8000.0, float, "mean photon count per detector bin", _pos),
    "noise.attenuation": Key(0.02, float, "attenuation coefficient (1/mm)", _pos),
    "noise.count_floor": Key(1.0, float, "minimum count before the log", lambda v: v >= 1),
    "data.train_size": Key(2000, int, "supervised training pairs", lambda v: v >= 1),
    "data.test_size": Key(32, int, "held-out ellipse test images", lambda v: v >= 1),
    "data.ood_size": Key(8, int, "out-of-distribution measurements", lambda v: v >= 1),
    "data.min_ellipses": Key(3, int, "fewest ellipses per phantom", lambda v: v >= 0),
    "data.max_ellipses": Key(10, int, "most ellipses per phantom", lambda v: v >= 0),
    "net.c1": Key(16, int, "channels at full resolution", lambda v: v >= 1),
    "net.c2": Key(32, int, "channels at half resolution", lambda v: v >= 1),
    "net.groups": Key(4, int, "GroupNorm groups", lambda v: v >= 1),
    "net.K": Key(3, int, "unrolled iterations", lambda v: v >= 1),
    "net.slope": Key(0.2, float, "leaky ReLU slope", _nonneg),
    "net.head_scale": Key(0.1, float, "initial scale of the output head kernels", _pos),
    "net.init_sigma": Key(1e-3, float, "initial posterior scale of encoder weights", _pos),
    "net.grad_scale": Key("auto", _auto_float, "data-gradient weight (auto: 1/||A||^2)", _pos),
    "hyper.beta": Key("auto", _auto_float, "phase-1 KL weight (auto: 1e-3 * pixels / encoder weights)", _nonneg),
    "hyper.ukt_beta": Key("auto", _auto_float, "phase-2 KL weight (auto: as hyper.beta)", _nonneg),
    "hyper.gamma": Key(1e-2, float, "phase-2 TV weight", _nonneg),
    "hyper.hutchinson_samples": Key(10, int, "Rademacher probes per trace estimate", lambda v: v >= 1),
    "hyper.train_mc_samples": Key(1, int, "weight draws per loss evaluation", lambda v: v >= 1),
    "hyper.tv_variant": Key("isotropic", _choice("isotropic", "anisotropic"), "TV flavour inside the phase-2 loss"),
    "hyper.tv_smooth_eps": Key(1e-6, float, "TV smoothing", _nonneg),
    "hyper.trace_mode": Key("hutchinson", _choice("hutchinson", "exact"), "trace estimator"),
    "train.epochs": Key(10, int, "phase-1 epochs", lambda v: v >= 1),
    "train.batch_size": Key(4, int, "phase-1 minibatch size", lambda v: v >= 1),
    "train.lr_max": Key(1e-3, float, "cosine schedule start", _pos),
    "train.lr_min": Key(1e-5, float, "cosine schedule end", _pos),
    "train.clip_norm": Key(10.0, float, "global gradient-norm clip (0 disables)", _nonneg),
    "ukt.steps": Key(200, int, "adaptation steps per measurement", lambda v: v >= 0),
    "ukt.lr": Key(1e-4, float, "adaptation learning rate", _pos),
    "ukt.cosine": Key(False, _bool, "cosine-anneal the adaptation rate"),
    "ukt.batch_mode": Key(False, _bool, "adapt once on all measurements instead of per measurement"),
    "infer.T": Key(10, int, "Monte-Carlo forwards per reconstruction", lambda v: v >= 1),
    "infer.fbp_cutoff": Key(0.6, float, "Hann cutoff of the FBP initialisation", lambda v: 0 < v <= 1),
    "tv.alpha": Key("auto", _auto_float, "TV baseline weight (auto: grid search)", _pos),
    "tv.iters": Key(500, int, "primal-dual iterations", lambda v: v >= 1),
    "tv.theta": Key(1.0, float, "over-relaxation", lambda v: 0 <= v <= 1),
    "tv.norm_margin": Key(1.05, float, "safety factor on the operator norm", lambda v: v >= 1),
    "tv.select_count": Key(5, int, "images used to pick alpha", lambda v: v >= 1),
}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Config:
    """Validated mapping from dotted keys to typed values."""

    def __init__(self, values: dict | None = None):
        self._values = {k: spec.default for k, spec in KEYS.items()}
        for k, v in (values or {}).items():
            self[k] = v

    def __getitem__(self, key: str):
        return self._values[key]

    def __setitem__(self, key: str, value) -> None:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        spec = KEYS[key]
        try:
            v = spec.parse(value) if isinstance(value, str) else value
            if isinstance(spec.default, float) and isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
            ok = spec.check(v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from None
        if not ok:
            raise ConfigError(f"{key}: value {value!r} out of range")
        self._values[key] = v

    def __eq__(self, other) -> bool:
        return isinstance(other, Config) and self._values == other._values

    def as_dict(self) -> dict:
        return dict(self._values)

    def echo(self) -> dict:
        return {k: _format(v) for k, v in self._values.items()}

    def serialize(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in self._values.items())

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()[:12]

    @classmethod
    def parse(cls, text: str) -> "Config":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            cfg[k] = v
        if cfg["data.min_ellipses"] > cfg["data.max_ellipses"]:
            raise ConfigError("data.min_ellipses exceeds data.max_ellipses")
        if cfg["train.lr_min"] > cfg["train.lr_max"]:
            raise ConfigError("train.lr_min exceeds train.lr_max")
        return cfg

    @classmethod
    def load(cls, path) -> "Config":
        return cls.parse(Path(path).read_text())


def help_text() -> str:
    width = max(map(len, KEYS))
    return "\n".join(f"  {k:<{width}}  {_format(s.default):>10}  {s.doc}" for k, s in KEYS.items())


# ---------------------------------------------------------------------------
# builders


def make_operator(cfg: Config):
    from .operators import Geometry, ImageGrid, build_projector

    grid = ImageGrid(cfg["grid.nx"], cfg["grid.ny"], cfg["grid.pixel_size"])
    geo = Geometry(cfg["geometry.beam"], cfg["geometry.n_angles"], cfg["geometry.n_detectors"],
                   cfg["geometry.detector_spacing"], cfg["geometry.d_source_axis"], cfg["geometry.d_axis_detector"])
    return build_projector(grid, geo)


def make_noise(cfg: Config):
    from .phantoms import NoiseModel

    return NoiseModel(cfg["noise.photons"], cfg["noise.attenuation"], cfg["noise.count_floor"])


def make_net_config(cfg: Config, op):
    from .bayesnet import NetConfig
    from .operators import operator_norm

    gs = cfg["net.grad_scale"]
    if gs == "auto":
        gs = 1.0 / operator_norm(op) ** 2
    return NetConfig(c1=cfg["net.c1"], c2=cfg["net.c2"], groups=cfg["net.groups"], slope=cfg["net.slope"],
                     K=cfg["net.K"], head_scale=cfg["net.head_scale"], grad_scale=gs,
                     init_sigma=cfg["net.init_sigma"])


def make_hyper(cfg: Config, phase: str, n_pixels: int, n_encoder: int):
    from .losses import HyperParams
    from .training import default_beta

    key = "hyper.beta" if phase == "supervised" else "hyper.ukt_beta"
    beta = cfg[key]
    if beta == "auto":
        beta = cfg["hyper.beta"]
    if beta == "auto":
        beta = default_beta(n_pixels, n_encoder)
    return HyperParams(beta=beta, gamma=cfg["hyper.gamma"], hutchinson_samples=cfg["hyper.hutchinson_samples"],
                       train_mc_samples=cfg["hyper.train_mc_samples"], tv_variant=cfg["hyper.tv_variant"],
                       tv_smooth_eps=cfg["hyper.tv_smooth_eps"], trace_mode=cfg["hyper.trace_mode"])


def make_train_config(cfg: Config, phase: str, seed: int, n_pixels: int, n_encoder: int):
    from .training import TrainConfig

    return TrainConfig(epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"], lr_max=cfg["train.lr_max"],
                       lr_min=cfg["train.lr_min"], seed=seed, hyper=make_hyper(cfg, phase, n_pixels, n_encoder),
                       phase=phase, ukt_steps=cfg["ukt.steps"], ukt_lr=cfg["ukt.lr"], ukt_cosine=cfg["ukt.cosine"],
                       clip_norm=cfg["train.clip_norm"])
