"""Portable file formats: SSV1 volume files, CSV tables, 8-bit PGM images.

An SSV1 file is one UTF-8 JSON header line followed by little-endian float32
samples in x-fastest order (then y, then t). Images use the same layout
with ``nt = 1``. All writers go through a temporary file and ``os.replace``
so a crashed run never leaves a truncated output behind.
"""

import csv
import io
import json
import os
import tempfile

import numpy as np

from .tensor import Image2D, Volume3D

__all__ = [
    "VolumeFormatError",
    "atomic_write_bytes",
    "atomic_write_text",
    "encode_volume",
    "decode_volume",
    "write_volume",
    "read_volume",
    "write_image",
    "read_image",
    "write_csv",
    "write_json",
    "write_pgm",
    "pgm_bytes",
]

MAGIC = "SSV1"
DTYPE = "f32le"
_HEADER_FIELDS = ("magic", "nx", "ny", "nt", "pixel_size_mm", "bin_width_ps", "dtype")


class VolumeFormatError(ValueError):
    """Malformed SSV1 content; the message names the offending field."""


def atomic_write_bytes(path, payload):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def encode_volume(data, pixel_size, bin_width):
    """Serialize an ``(nx, ny, nt)`` array; values are rounded to float32."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {data.shape}")
    nx, ny, nt = data.shape
    header = {
        "magic": MAGIC, "nx": int(nx), "ny": int(ny), "nt": int(nt),
        "pixel_size_mm": float(pixel_size), "bin_width_ps": float(bin_width), "dtype": DTYPE,
    }
    line = json.dumps(header, separators=(",", ":")) + "\n"
    payload = np.asarray(data, dtype="<f4").tobytes(order="F")
    return line.encode("utf-8") + payload


def _positive_int(header, name):
    value = header.get(name)
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise VolumeFormatError(f"header field {name!r} must be a positive integer, got {value!r}")
    return value


def _positive_float(header, name):
    value = header.get(name)
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value) or value <= 0:
        raise VolumeFormatError(f"header field {name!r} must be a positive number, got {value!r}")
    return float(value)


def decode_volume(blob):
    """Parse SSV1 bytes into ``(array, header)``; the array is float32."""
    newline = blob.find(b"\n")
    if newline < 0:
        raise VolumeFormatError("header line is not newline-terminated")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise VolumeFormatError("header must be a JSON object")
    for name in _HEADER_FIELDS:
        if name not in header:
            raise VolumeFormatError(f"header field {name!r} is missing")
    unknown = sorted(set(header) - set(_HEADER_FIELDS))
    if unknown:
        raise VolumeFormatError(f"header field {unknown[0]!r} is not recognized")
    if header["magic"] != MAGIC:
        raise VolumeFormatError(f"header field 'magic' must be {MAGIC!r}, got {header['magic']!r}")
    if header["dtype"] != DTYPE:
        raise VolumeFormatError(f"header field 'dtype' must be {DTYPE!r}, got {header['dtype']!r}")
    nx, ny, nt = (_positive_int(header, k) for k in ("nx", "ny", "nt"))
    _positive_float(header, "pixel_size_mm")
    _positive_float(header, "bin_width_ps")
    payload = blob[newline + 1:]
    expected = 4 * nx * ny * nt
    if len(payload) != expected:
        raise VolumeFormatError(f"payload has {len(payload)} bytes, header 'nx'/'ny'/'nt' imply {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape((nx, ny, nt), order="F")
    return data, header


def write_volume(path, volume):
    atomic_write_bytes(path, encode_volume(volume.data, volume.pixel_size, volume.bin_width))


def read_volume(path):
    """Load a :class:`Volume3D`; float32 samples are widened to float64 exactly."""
    with open(path, "rb") as fh:
        data, header = decode_volume(fh.read())
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError("payload contains non-finite samples")
    return Volume3D(data.astype(np.float64), header["pixel_size_mm"], header["bin_width_ps"])


def write_image(path, image, bin_width=1.0):
    """2D payload in the volume layout with ``nt = 1``."""
    atomic_write_bytes(path, encode_volume(image.data[:, :, None], image.pixel_size, bin_width))


def read_image(path):
    with open(path, "rb") as fh:
        data, header = decode_volume(fh.read())
    if header["nt"] != 1:
        raise VolumeFormatError(f"header field 'nt' must be 1 for an image, got {header['nt']}")
    return Image2D(data[:, :, 0].astype(np.float64), header["pixel_size_mm"])


def write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    atomic_write_text(path, buf.getvalue())


def pgm_bytes(array):
    """Binary PGM of a 2D array, min-max scaled to 0..255.

    Rows of the image are the y index and columns the x index, written
    row-major. A constant array maps to all zeros.
    """
    a = np.asarray(array, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2D array, got shape {a.shape}")
    lo, hi = float(a.min()), float(a.max())
    scaled = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    pixels = np.rint(scaled * 255.0).astype(np.uint8).T
    nx, ny = a.shape
    return f"P5\n{nx} {ny}\n255\n".encode("ascii") + pixels.tobytes(order="C")


def write_pgm(path, array):
    atomic_write_bytes(path, pgm_bytes(array))
