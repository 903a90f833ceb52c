"""Discrete Radon transform for 2D parallel- and fan-beam geometries.

The projector is a ray-driven Joseph-style model materialised as a sparse
matrix, so the adjoint is the exact transpose. Filtered backprojection uses a
separate pixel-driven backprojector with linear detector interpolation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp


class GeometryError(ValueError):
    """Raised for invalid grids/geometries or when no ray meets the grid."""


@dataclass(frozen=True)
class ImageGrid:
    nx: int
    ny: int
    pixel_size: float = 1.0

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise GeometryError(f"grid must be at least 2x2, got {self.nx}x{self.ny}")
        if not self.pixel_size > 0:
            raise GeometryError(f"pixel_size must be positive, got {self.pixel_size}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical (x, y) coordinates of pixel centers, each of shape (ny, nx)."""
        xs = (np.arange(self.nx) - (self.nx - 1) / 2) * self.pixel_size
        ys = (np.arange(self.ny) - (self.ny - 1) / 2) * self.pixel_size
        return np.meshgrid(xs, ys)


@dataclass(frozen=True)
class Geometry:
    """Acquisition geometry.

    Parallel beam: ray for angle ``theta`` and detector offset ``t`` is the
    line ``{p : p . (cos theta, sin theta) = t}``.
    Fan beam (flat detector): the source sits at ``-d_source_axis * e`` and
    the detector center at ``d_axis_detector * e`` with
    ``e = (-sin beta, cos beta)``; bins are spread along ``(cos beta, sin beta)``.
    """

    beam: str
    n_angles: int
    n_detectors: int
    detector_spacing: float
    d_source_axis: float = 500.0
    d_axis_detector: float = 500.0
    angles: Optional[tuple] = field(default=None)

    def __post_init__(self):
        if self.beam not in ("parallel", "fan"):
            raise GeometryError(f"beam must be 'parallel' or 'fan', got {self.beam!r}")
        if self.n_angles < 1 or self.n_detectors < 1:
            raise GeometryError("n_angles and n_detectors must be >= 1")
        if not self.detector_spacing > 0:
            raise GeometryError("detector_spacing must be positive")
        if self.beam == "fan" and not (self.d_source_axis > 0 and self.d_axis_detector > 0):
            raise GeometryError("fan beam needs positive source/detector distances")
        if self.angles is None:
            span = np.pi if self.beam == "parallel" else 2 * np.pi
            object.__setattr__(
                self, "angles", tuple(np.arange(self.n_angles) * span / self.n_angles)
            )
        elif len(self.angles) != self.n_angles:
            raise GeometryError("len(angles) must equal n_angles")

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.n_angles, self.n_detectors)

    def detector_offsets(self) -> np.ndarray:
        return (np.arange(self.n_detectors) - (self.n_detectors - 1) / 2) * self.detector_spacing


def geometry_hash(grid: ImageGrid, geometry: Geometry) -> int:
    """Stable 64-bit identifier of a (grid, geometry) pair."""
    parts = [
        grid.nx, grid.ny, repr(float(grid.pixel_size)), geometry.beam, geometry.n_angles,
        geometry.n_detectors, repr(float(geometry.detector_spacing)),
    ]
    if geometry.beam == "fan":
        parts += [repr(float(geometry.d_source_axis)), repr(float(geometry.d_axis_detector))]
    parts += [repr(float(a)) for a in geometry.angles]
    digest = hashlib.sha256("|".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def ray_set(geometry: Geometry) -> tuple[np.ndarray, np.ndarray]:
    """Start points and unit directions of every ray, rows ordered (angle, detector)."""
    angles = np.asarray(geometry.angles, dtype=np.float64)
    t = geometry.detector_offsets()
    cos, sin = np.cos(angles)[:, None], np.sin(angles)[:, None]
    e = np.stack(np.broadcast_arrays(-sin, cos), axis=-1)  # (A, 1, 2)
    u = np.stack(np.broadcast_arrays(cos, sin), axis=-1)
    if geometry.beam == "parallel":
        # start far behind the grid; only the line matters
        start = t[None, :, None] * u - 1e6 * e
        direction = np.broadcast_to(e, start.shape)
    else:
        src = -geometry.d_source_axis * e
        det = geometry.d_axis_detector * e + t[None, :, None] * u
        start = np.broadcast_to(src, det.shape)
        direction = det - src
        direction = direction / np.linalg.norm(direction, axis=-1, keepdims=True)
    return start.reshape(-1, 2).copy(), np.ascontiguousarray(direction.reshape(-1, 2))


def _clip_to_box(start, direction, half_x, half_y):
    """Parametric [t_in, t_out] of each ray inside the grid's bounding box."""
    t_in = np.full(len(start), -np.inf)
    t_out = np.full(len(start), np.inf)
    for axis, half in ((0, half_x), (1, half_y)):
        p, d = start[:, axis], direction[:, axis]
        moving = np.abs(d) > 1e-15
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (-half - p) / d
            tb = (half - p) / d
        lo = np.where(moving, np.minimum(ta, tb), np.where(np.abs(p) <= half, -np.inf, np.inf))
        hi = np.where(moving, np.maximum(ta, tb), np.where(np.abs(p) <= half, np.inf, -np.inf))
        t_in = np.maximum(t_in, lo)
        t_out = np.minimum(t_out, hi)
    return t_in, t_out


def _joseph_entries(start, direction, t_in, t_out, n_major, n_minor, ps, major_axis):
    """Sparse entries for rays stepping along ``major_axis``.

    Each pixel line orthogonal to the major axis contributes the ray length
    inside that line's slab, split by linear interpolation between the two
    nearest pixel centers at the point where the ray crosses the line center
    (clamped to the outermost centers).
    """
    minor_axis = 1 - major_axis
    n_rays = len(start)
    centers_major = (np.arange(n_major) - (n_major - 1) / 2) * ps
    p_maj = start[:, major_axis][:, None]
    d_maj = direction[:, major_axis][:, None]
    p_min = start[:, minor_axis][:, None]
    d_min = direction[:, minor_axis][:, None]

    ta = (centers_major[None, :] - ps / 2 - p_maj) / d_maj
    tb = (centers_major[None, :] + ps / 2 - p_maj) / d_maj
    seg = np.minimum(np.maximum(ta, tb), t_out[:, None]) - np.maximum(
        np.minimum(ta, tb), t_in[:, None]
    )
    seg = np.maximum(seg, 0.0)

    t_center = (centers_major[None, :] - p_maj) / d_maj
    frac = (p_min + t_center * d_min) / ps + (n_minor - 1) / 2
    frac = np.clip(frac, 0.0, n_minor - 1)
    lo = np.minimum(np.floor(frac), n_minor - 2).astype(np.int64)
    w_hi = frac - lo
    w_lo = 1.0 - w_hi

    rows = np.broadcast_to(np.arange(n_rays)[:, None], seg.shape)
    lines = np.broadcast_to(np.arange(n_major)[None, :], seg.shape)
    out_rows, out_cols, out_vals = [], [], []
    for minor_idx, weight in ((lo, w_lo), (lo + 1, w_hi)):
        vals = seg * weight
        keep = vals > 0
        if major_axis == 1:  # lines are image rows, minor index is the column
            cols = lines[keep] * n_minor + minor_idx[keep]
        else:  # lines are image columns, minor index is the row
            cols = minor_idx[keep] * n_major + lines[keep]
        out_rows.append(rows[keep])
        out_cols.append(cols)
        out_vals.append(vals[keep])
    return np.concatenate(out_rows), np.concatenate(out_cols), np.concatenate(out_vals)


class ProjectionOperator:
    """Sparse system matrix A for a fixed grid and geometry.

    Images have shape ``(ny, nx)``, sinograms ``(n_angles, n_detectors)``;
    any leading batch dimensions are carried through.
    """

    def __init__(self, grid: ImageGrid, geometry: Geometry, matrix: sp.csr_matrix):
        self.grid = grid
        self.geometry = geometry
        matrix = matrix.tocsr()
        for arr in (matrix.data, matrix.indices, matrix.indptr):
            arr.flags.writeable = False
        self._matrix = matrix
        self._matrix_t = matrix.T.tocsr()
        for arr in (self._matrix_t.data, self._matrix_t.indices, self._matrix_t.indptr):
            arr.flags.writeable = False
        self.hash = geometry_hash(grid, geometry)
        self._casts = {}

    @property
    def matrix(self) -> sp.csr_matrix:
        return self._matrix

    @property
    def dtype(self):
        return self._matrix.dtype

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def sino_shape(self) -> tuple[int, int]:
        return self.geometry.sino_shape

    def astype(self, dtype) -> "ProjectionOperator":
        """Operator with the weights cast to ``dtype`` (e.g. float32 for training); cached."""
        dtype = np.dtype(dtype)
        if dtype == self.dtype:
            return self
        if dtype not in self._casts:
            self._casts[dtype] = ProjectionOperator(self.grid, self.geometry, self._matrix.astype(dtype))
        return self._casts[dtype]

    def _apply(self, mat, x, in_shape, out_shape, what):
        x = np.asarray(x)
        if x.shape[-2:] != in_shape:
            raise ValueError(f"{what}: expected trailing shape {in_shape}, got {x.shape}")
        lead = x.shape[:-2]
        flat = x.reshape(-1, in_shape[0] * in_shape[1])
        out = (mat @ flat.T).T
        return np.ascontiguousarray(out).reshape(*lead, *out_shape)

    def forward(self, image) -> np.ndarray:
        return self._apply(self._matrix, image, self.image_shape, self.sino_shape, "forward")

    def adjoint(self, sino) -> np.ndarray:
        return self._apply(self._matrix_t, sino, self.sino_shape, self.image_shape, "adjoint")

    def column_norms_sq(self) -> np.ndarray:
        """Squared column norms ``||A e_j||^2`` as an image."""
        sq = self._matrix.multiply(self._matrix)
        return np.asarray(sq.sum(axis=0)).reshape(self.image_shape)


def build_projector(grid: ImageGrid, geometry: Geometry, dtype=np.float64) -> ProjectionOperator:
    start, direction = ray_set(geometry)
    half_x, half_y = grid.nx * grid.pixel_size / 2, grid.ny * grid.pixel_size / 2
    t_in, t_out = _clip_to_box(start, direction, half_x, half_y)
    hits = (t_out - t_in) > 1e-12 * grid.pixel_size
    if not hits.any():
        raise GeometryError("no ray of the geometry intersects the image grid")
    t_in = np.where(hits, t_in, 0.0)
    t_out = np.where(hits, t_out, 0.0)

    y_major = np.abs(direction[:, 1]) >= np.abs(direction[:, 0])
    rows, cols, vals = [], [], []
    for mask, major_axis, n_major, n_minor in (
        (y_major, 1, grid.ny, grid.nx),
        (~y_major, 0, grid.nx, grid.ny),
    ):
        idx = np.flatnonzero(mask & hits)
        if idx.size == 0:
            continue
        r, c, v = _joseph_entries(
            start[idx], direction[idx], t_in[idx], t_out[idx],
            n_major, n_minor, grid.pixel_size, major_axis,
        )
        rows.append(idx[r])
        cols.append(c)
        vals.append(v)
    rows, cols, vals = map(np.concatenate, (rows, cols, vals))
    n_rays = geometry.n_angles * geometry.n_detectors
    matrix = sp.csr_matrix((vals.astype(dtype), (rows, cols)), shape=(n_rays, grid.size))
    matrix.sum_duplicates()
    matrix.sort_indices()
    return ProjectionOperator(grid, geometry, matrix)


def forward(op: ProjectionOperator, image) -> np.ndarray:
    return op.forward(image)


def adjoint(op: ProjectionOperator, sino) -> np.ndarray:
    return op.adjoint(sino)


# ---------------------------------------------------------------------------
# Filtered backprojection


def _filter_response(n: int, spacing: float, filter_name: str, cutoff: float):
    """Frequency response of the windowed ramp for a zero-padded length."""
    n_pad = int(2 ** np.ceil(np.log2(2 * n)))
    k = np.arange(-(n_pad // 2), n_pad // 2)
    h = np.zeros(n_pad)
    h[k == 0] = 1.0 / (4 * spacing**2)
    odd = (k % 2) != 0
    h[odd] = -1.0 / (np.pi * k[odd] * spacing) ** 2
    # spatial-domain ramp keeps the DC term correct
    response = np.real(np.fft.fft(np.fft.ifftshift(h))) * spacing
    freq = np.abs(np.fft.fftfreq(n_pad)) * 2  # 1.0 at Nyquist
    if filter_name == "ram-lak":
        window = np.ones_like(freq)
    elif filter_name == "hann":
        window = 0.5 * (1 + np.cos(np.pi * freq / cutoff))
    else:
        raise ValueError(f"unknown filter {filter_name!r}")
    window[freq > cutoff] = 0.0
    return response * window, n_pad


def _ramp_filter(sino: np.ndarray, spacing: float, filter_name: str, cutoff: float) -> np.ndarray:
    n = sino.shape[-1]
    response, n_pad = _filter_response(n, spacing, filter_name, cutoff)
    spectrum = np.fft.fft(sino, n=n_pad, axis=-1) * response
    return np.real(np.fft.ifft(spectrum, axis=-1))[..., :n]


def _interp_rows(q: np.ndarray, coords: np.ndarray, t0: float, dt: float) -> np.ndarray:
    """Linear interpolation of ``q`` (n,) at ``coords``; zero outside the detector."""
    n = q.shape[-1]
    f = (coords - t0) / dt
    inside = (f >= 0) & (f <= n - 1)
    fc = np.clip(f, 0, n - 1)
    lo = np.minimum(np.floor(fc).astype(np.int64), max(n - 2, 0))
    w = fc - lo
    hi = np.minimum(lo + 1, n - 1)
    return np.where(inside, (1 - w) * q[lo] + w * q[hi], 0.0)


def fbp(op: ProjectionOperator, sino, filter: str = "hann", cutoff: float = 1.0) -> np.ndarray:
    """Filtered backprojection estimate of the image from a sinogram."""
    if not (0 < cutoff <= 1):
        raise ValueError(f"cutoff must lie in (0, 1], got {cutoff}")
    geo, grid = op.geometry, op.grid
    sino = np.asarray(sino, dtype=np.float64)
    if sino.shape != geo.sino_shape:
        raise ValueError(f"fbp: expected sinogram shape {geo.sino_shape}, got {sino.shape}")
    xs, ys = grid.centers()
    angles = np.asarray(geo.angles)
    t = geo.detector_offsets()
    image = np.zeros(grid.shape)

    if geo.beam == "parallel":
        q = _ramp_filter(sino, geo.detector_spacing, filter, cutoff)
        for a, theta in enumerate(angles):
            s = xs * np.cos(theta) + ys * np.sin(theta)
            image += _interp_rows(q[a], s, t[0], geo.detector_spacing)
        image *= np.pi / geo.n_angles
    else:
        d = geo.d_source_axis
        scale = d / (geo.d_source_axis + geo.d_axis_detector)
        s_det = t * scale  # detector coordinates at the rotation axis
        tau = geo.detector_spacing * scale
        weighted = sino * (d / np.sqrt(d**2 + s_det**2))[None, :]
        q = 0.5 * _ramp_filter(weighted, tau, filter, cutoff)
        for a, beta in enumerate(angles):
            e_dot = -xs * np.sin(beta) + ys * np.cos(beta)
            u_dot = xs * np.cos(beta) + ys * np.sin(beta)
            dist = d + e_dot
            s = u_dot * d / dist
            image += (d / dist) ** 2 * _interp_rows(q[a], s, s_det[0], tau)
        image *= 2 * np.pi / geo.n_angles
    return np.nan_to_num(image, nan=0.0, posinf=0.0, neginf=0.0)


def operator_norm(op, iters: int = 50, seed: int = 0) -> float:
    """Power-method estimate of the spectral norm ``||A||_2``.

    ``op`` only needs ``image_shape``, ``forward`` and ``adjoint``. The
    estimate ``sqrt(||A^T A v_k||)`` with normalised ``v_k`` is
    non-decreasing in ``iters``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(op.image_shape)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(iters):
        w = op.adjoint(op.forward(v))
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        estimate = np.sqrt(norm)
        v = w / norm
    return float(estimate)

