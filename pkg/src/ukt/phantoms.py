"""Synthetic phantoms, the low-dose corruption model and dataset files.

Dataset file layout (little-endian)::

    b"BDGD" | u32 version | u64 record count | u32 nx | u32 ny | u64 geometry hash
    then per record: u8 flags (bit 0: has ground truth) | u64 child seed
    | [TNSR ground truth] | TNSR sinogram | TNSR fbp_init
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .formats import (
    FormatError,
    VersionError,
    atomic_write,
    decode_tensor,
    encode_tensor,
    write_tensor,
)
from .operators import ImageGrid, ProjectionOperator, fbp

DATASET_MAGIC = b"BDGD"
DATASET_VERSION = 1
KINDS = ("supervised-ellipses", "unsupervised-ood")


@dataclass(frozen=True)
class Ellipse:
    """Ellipse in normalised grid coordinates (the grid spans [-1, 1] on each axis)."""

    cx: float
    cy: float
    a: float
    b: float
    angle: float
    intensity: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("ellipse semi-axes must be positive")
        if not 0.1 <= self.intensity <= 1.0:
            raise ValueError(f"ellipse intensity {self.intensity} outside [0.1, 1]")


@dataclass(frozen=True)
class NoiseModel:
    photons_per_pixel: float = 8000.0
    attenuation: float = 0.02
    count_floor: float = 1.0

    def __post_init__(self):
        if not self.photons_per_pixel > 0:
            raise ValueError("photons_per_pixel must be positive")
        if not self.attenuation > 0:
            raise ValueError("attenuation must be positive")
        if not self.count_floor >= 1:
            raise ValueError("count_floor must be at least one photon")


@dataclass
class DatasetRecord:
    sinogram: np.ndarray
    fbp_init: np.ndarray
    seed: int
    geometry_hash: int
    ground_truth: Optional[np.ndarray] = None


def normalized_coords(grid: ImageGrid) -> tuple[np.ndarray, np.ndarray]:
    xs = (np.arange(grid.nx) - (grid.nx - 1) / 2) / (grid.nx / 2)
    ys = (np.arange(grid.ny) - (grid.ny - 1) / 2) / (grid.ny / 2)
    return np.meshgrid(xs, ys)


def render_ellipses(ellipses, grid: ImageGrid) -> np.ndarray:
    """Sum of indicator functions of the ellipses at the pixel centers."""
    X, Y = normalized_coords(grid)
    image = np.zeros(grid.shape)
    for e in ellipses:
        c, s = np.cos(e.angle), np.sin(e.angle)
        u = (X - e.cx) * c + (Y - e.cy) * s
        v = -(X - e.cx) * s + (Y - e.cy) * c
        image[(u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0] += e.intensity
    return image


def sample_ellipses(rng: np.random.Generator, min_count: int = 3, max_count: int = 10,
                    count: Optional[int] = None) -> list[Ellipse]:
    if not max_count >= min_count >= 1:
        raise ValueError("need max_count >= min_count >= 1")
    n = int(rng.integers(min_count, max_count + 1)) if count is None else count
    out = []
    for _ in range(n):
        cx, cy = rng.uniform(-0.5, 0.5, size=2)
        a, b = rng.uniform(0.08, 0.45, size=2)
        angle = rng.uniform(0.0, np.pi)
        intensity = rng.uniform(0.1, 1.0)
        out.append(Ellipse(cx, cy, a, b, angle, intensity))
    return out


def sample_ellipse_phantom(rng: np.random.Generator, grid: ImageGrid, min_count: int = 3,
                           max_count: int = 10, count: Optional[int] = None) -> np.ndarray:
    """Random overlapping ellipses on a zero background; overlaps add up.

    ``count`` overrides the random ellipse count (used by tests).
    """
    return render_ellipses(sample_ellipses(rng, min_count, max_count, count), grid)


def _rect_in_cell(rng, x0, x1, y0, y1):
    w = rng.uniform(0.3, 0.9) * (x1 - x0)
    h = rng.uniform(0.3, 0.9) * (y1 - y0)
    left = rng.uniform(x0, x1 - w)
    bottom = rng.uniform(y0, y1 - h)
    return left, left + w, bottom, bottom + h


def sample_ood_phantom(rng: np.random.Generator, grid: ImageGrid) -> np.ndarray:
    """Annulus enclosing axis-aligned rectangles.

    Rectangles come in two layers (3x3 and 2x2 tilings of the annulus hole),
    and within a layer each rectangle stays in its own cell, so no pixel is
    covered by more than three shapes.
    """
    X, Y = normalized_coords(grid)
    r = np.hypot(X, Y)
    r_out = rng.uniform(0.75, 0.92)
    r_in = r_out - rng.uniform(0.06, 0.16)
    image = np.where((r <= r_out) & (r >= r_in), rng.uniform(0.1, 1.0), 0.0)

    half = r_in / np.sqrt(2)
    for tiles, (k_min, k_max) in ((3, (2, 5)), (2, (1, 2))):
        edges = np.linspace(-half, half, tiles + 1)
        k = int(rng.integers(k_min, k_max + 1))
        for cell in rng.choice(tiles * tiles, size=k, replace=False):
            i, j = divmod(int(cell), tiles)
            x0, x1, y0, y1 = _rect_in_cell(rng, edges[j], edges[j + 1], edges[i], edges[i + 1])
            inside = (X >= x0) & (X <= x1) & (Y >= y0) & (Y <= y1)
            image[inside] += rng.uniform(0.1, 1.0)
    return image


def simulate_counts(sino, noise: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    """Poisson photon counts with mean ``lambda * exp(-mu * s)``."""
    s = np.maximum(np.asarray(sino, dtype=np.float64), 0.0)
    mean = noise.photons_per_pixel * np.exp(-noise.attenuation * s)
    return rng.poisson(mean).astype(np.float64)


def linearize(counts, noise: NoiseModel) -> np.ndarray:
    """Post-log line integrals ``-log(max(counts, floor) / lambda) / mu``."""
    c = np.maximum(np.asarray(counts, dtype=np.float64), noise.count_floor)
    return -np.log(c / noise.photons_per_pixel) / noise.attenuation


def child_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint64)[0])


def make_record(kind: str, seed: int, op: ProjectionOperator, noise: NoiseModel,
                min_count: int = 3, max_count: int = 10, fbp_cutoff: float = 0.6):
    """One (phantom, measurement) pair generated from ``seed``; returns (record, phantom)."""
    rng = np.random.default_rng(seed)
    if kind == "supervised-ellipses":
        phantom = sample_ellipse_phantom(rng, op.grid, min_count, max_count)
    elif kind == "unsupervised-ood":
        phantom = sample_ood_phantom(rng, op.grid)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    y = linearize(simulate_counts(op.forward(phantom), noise, rng), noise)
    x0 = fbp(op, y, "hann", fbp_cutoff)
    record = DatasetRecord(
        sinogram=y.astype(np.float32),
        fbp_init=x0.astype(np.float32),
        seed=seed,
        geometry_hash=op.hash,
        ground_truth=phantom.astype(np.float32) if kind == "supervised-ellipses" else None,
    )
    return record, phantom


def generate_dataset(kind: str, n: int, op: ProjectionOperator, noise: NoiseModel, seed: int,
                     out_path, threads: int = 1, min_count: int = 3, max_count: int = 10,
                     reference_path=None) -> list[DatasetRecord]:
    """Generate ``n`` records and write them to ``out_path``.

    Record ``i`` is a pure function of ``child_seed(seed, i)``, so the file
    does not depend on ``threads``. ``reference_path`` optionally receives
    the phantoms as a stacked tensor for evaluation of unsupervised sets.
    """
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    seeds = [child_seed(seed, i) for i in range(n)]

    def work(s):
        return make_record(kind, s, op, noise, min_count, max_count)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, seeds))
    else:
        results = [work(s) for s in seeds]
    records = [r for r, _ in results]
    write_dataset(out_path, records, op.grid)
    if reference_path is not None:
        write_tensor(reference_path, np.stack([p for _, p in results]).astype(np.float32))
    return records


def write_dataset(path, records: list[DatasetRecord], grid: ImageGrid) -> None:
    if not records:
        raise ValueError("cannot write an empty dataset")
    ghash = records[0].geometry_hash
    parts = [DATASET_MAGIC, struct.pack("<IQIIQ", DATASET_VERSION, len(records), grid.nx, grid.ny, ghash)]
    for rec in records:
        if rec.geometry_hash != ghash:
            raise ValueError("records with different geometries in one dataset")
        has_gt = rec.ground_truth is not None
        parts.append(struct.pack("<BQ", int(has_gt), rec.seed))
        if has_gt:
            parts.append(encode_tensor(rec.ground_truth))
        parts.append(encode_tensor(rec.sinogram))
        parts.append(encode_tensor(rec.fbp_init))
    atomic_write(path, b"".join(parts))


@dataclass
class DatasetHeader:
    count: int
    nx: int
    ny: int
    geometry_hash: int


def read_dataset(path, strip_ground_truth: bool = False) -> tuple[DatasetHeader, list[DatasetRecord]]:
    """Load a dataset file; with ``strip_ground_truth`` stored phantoms are dropped."""
    buf = Path(path).read_bytes()
    if buf[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a dataset file")
    try:
        version, count, nx, ny, ghash = struct.unpack_from("<IQIIQ", buf, 4)
    except struct.error:
        raise FormatError(f"{path}: truncated header") from None
    if version != DATASET_VERSION:
        raise VersionError(f"{path}: dataset version {version}, reader supports {DATASET_VERSION}")
    header = DatasetHeader(count, nx, ny, ghash)
    pos = 4 + struct.calcsize("<IQIIQ")
    records = []
    for _ in range(count):
        try:
            flags, seed = struct.unpack_from("<BQ", buf, pos)
        except struct.error:
            raise FormatError(f"{path}: truncated record") from None
        pos += 9
        gt = None
        if flags & 1:
            if strip_ground_truth:
                _, pos = decode_tensor(buf, pos)
            else:
                gt, pos = decode_tensor(buf, pos)
        sino, pos = decode_tensor(buf, pos)
        x0, pos = decode_tensor(buf, pos)
        records.append(DatasetRecord(sino, x0, seed, ghash, gt))
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes after {count} records")
    return header, records
