"""Binary tensor framing, 16-bit PGM images and the metrics CSV.

TNSR frame (little-endian)::

    b"TNSR" | u32 version | u8 dtype (0=f32, 1=f64) | u32 rank | u64 dims[rank]
    | payload | u32 crc32(everything before the crc)
"""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    """Malformed or unsupported file content."""


class ChecksumError(FormatError):
    """CRC mismatch, usually a truncated or corrupted file."""


class VersionError(FormatError):
    """File written by an unsupported format version."""


def encode_tensor(array) -> bytes:
    array = np.asarray(array)
    if array.dtype not in _CODES:
        raise FormatError(f"unsupported dtype {array.dtype}; use float32 or float64")
    code = _CODES[array.dtype]
    head = TNSR_MAGIC + struct.pack("<IBI", TNSR_VERSION, code, array.ndim)
    head += struct.pack(f"<{array.ndim}Q", *array.shape)
    body = head + np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one frame starting at ``offset``; returns (array, next offset)."""
    try:
        if buf[offset:offset + 4] != TNSR_MAGIC:
            raise FormatError("bad TNSR magic")
        version, code, rank = struct.unpack_from("<IBI", buf, offset + 4)
        if version != TNSR_VERSION:
            raise VersionError(f"TNSR version {version} unsupported (reader supports {TNSR_VERSION})")
        if code not in _DTYPES:
            raise FormatError(f"unknown TNSR dtype code {code}")
        pos = offset + 13
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        end = pos + nbytes
        if end + 4 > len(buf):
            raise ChecksumError("TNSR frame truncated")
        (crc,) = struct.unpack_from("<I", buf, end)
    except struct.error as exc:
        raise ChecksumError(f"TNSR frame truncated: {exc}") from None
    if zlib.crc32(buf[offset:end]) != crc:
        raise ChecksumError("TNSR checksum mismatch")
    array = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
    return array.reshape(dims).astype(dtype.newbyteorder("="), copy=True), end + 4


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path, array) -> None:
    atomic_write(path, encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    array, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{path}: trailing bytes after tensor frame")
    return array


# ---------------------------------------------------------------------------
# PGM


def write_image_pgm(image, path, window: tuple[float, float]) -> None:
    """16-bit binary PGM with values mapped affinely from ``window`` to [0, 65535]."""
    lo, hi = map(float, window)
    if not hi > lo:
        raise ValueError(f"window must satisfy hi > lo, got ({lo}, {hi})")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("PGM export needs a 2D image")
    scaled = np.clip((image - lo) / (hi - lo), 0.0, 1.0) * 65535.0
    payload = np.rint(scaled).astype(">u2").tobytes()
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n65535\n".encode()
    atomic_write(path, header + payload)


def read_image_pgm(path, window: tuple[float, float] = (0.0, 65535.0)) -> np.ndarray:
    """Read a 16-bit PGM written by :func:`write_image_pgm`, mapping back to ``window``."""
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 65535:
        raise FormatError(f"{path}: not a 16-bit binary PGM")
    width, height = int(parts[1]), int(parts[2])
    payload = raw[len(raw) - 2 * width * height:]
    counts = np.frombuffer(payload, dtype=">u2").reshape(height, width).astype(np.float64)
    lo, hi = window
    return lo + counts / 65535.0 * (hi - lo)


# ---------------------------------------------------------------------------
# metrics CSV

METRIC_COLUMNS = ("sample_id", "method", "psnr_db", "ssim", "wall_ms", "seed", "config_hash")


def metrics_csv_append(path, row: dict) -> None:
    """Append one row; the file is rewritten through a rename so rows are never partial."""
    missing = set(METRIC_COLUMNS) - set(row)
    if missing:
        raise ValueError(f"metrics row missing columns: {sorted(missing)}")
    path = Path(path)
    existing = path.read_bytes() if path.exists() else b""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    if not existing:
        writer.writerow(METRIC_COLUMNS)
    writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
    atomic_write(path, existing + out.getvalue().encode())


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
