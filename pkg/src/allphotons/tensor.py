"""Dense (x, y, t) volumes and (x, y) images with physical sampling metadata.

Arrays are indexed ``data[ix, iy, it]``. Flattening for vectorization and for
files uses x-fastest order (``order="F"``), so pixel ``(ix, iy)`` maps to the
linear index ``ix + nx * iy`` and voxel ``(ix, iy, it)`` to
``ix + nx * (iy + ny * it)``.
"""

from dataclasses import dataclass

import numpy as np
import scipy.fft

__all__ = [
    "Volume3D",
    "Image2D",
    "conv3d",
    "conv3d_adjoint",
    "fft_shape",
    "multiply_mask",
    "integrate_time",
    "vec_normalized",
    "vec",
    "unvec",
]


def _check_positive(name, value):
    if not (np.isfinite(value) and value > 0):
        raise ValueError(f"{name} must be positive and finite, got {value!r}")


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Photon counts or intensities sampled on an (x, y, t) grid.

    ``pixel_size`` is in mm and ``bin_width`` in ps.
    """

    data: np.ndarray
    pixel_size: float
    bin_width: float

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"Volume3D needs a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("Volume3D data contains non-finite values")
        _check_positive("pixel_size", self.pixel_size)
        _check_positive("bin_width", self.bin_width)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "pixel_size", float(self.pixel_size))
        object.__setattr__(self, "bin_width", float(self.bin_width))

    @property
    def shape(self):
        return self.data.shape

    @property
    def nx(self):
        return self.data.shape[0]

    @property
    def ny(self):
        return self.data.shape[1]

    @property
    def nt(self):
        return self.data.shape[2]

    def with_data(self, data):
        return Volume3D(data, self.pixel_size, self.bin_width)

    @classmethod
    def zeros(cls, nx, ny, nt, pixel_size, bin_width):
        return cls(np.zeros((nx, ny, nt)), pixel_size, bin_width)

    @classmethod
    def impulse(cls, nx, ny, nt, pixel_size, bin_width, index=None, value=1.0):
        """Single nonzero voxel; defaults to the spatial center at bin 0."""
        data = np.zeros((nx, ny, nt))
        if index is None:
            index = (nx // 2, ny // 2, 0)
        data[index] = value
        return cls(data, pixel_size, bin_width)


@dataclass(frozen=True, eq=False)
class Image2D:
    """A 2D frame such as a transmission mask or a time-integrated image."""

    data: np.ndarray
    pixel_size: float

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or min(data.shape) < 1:
            raise ValueError(f"Image2D needs a non-empty 2D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("Image2D data contains non-finite values")
        _check_positive("pixel_size", self.pixel_size)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "pixel_size", float(self.pixel_size))

    @property
    def shape(self):
        return self.data.shape

    @property
    def nx(self):
        return self.data.shape[0]

    @property
    def ny(self):
        return self.data.shape[1]


def fft_shape(a_shape, b_shape):
    """Per-axis power-of-two transform size that avoids circular wraparound."""
    return tuple(1 << int(np.ceil(np.log2(n + m - 1))) for n, m in zip(a_shape, b_shape))


def default_origin(shape):
    """Kernel origin used for "same" cropping: spatial center, first time bin."""
    return (shape[0] // 2, shape[1] // 2, 0)


def _conv_same(a, b, origin=None, b_hat=None):
    """Linear convolution of ``a`` with ``b``, cropped to ``a.shape``.

    ``out[i] = sum_p a[i - p + origin] * b[p]`` along every axis.
    ``b_hat`` may carry a precomputed ``rfftn`` of ``b`` at ``fft_shape``.
    """
    if origin is None:
        origin = default_origin(b.shape)
    shape = fft_shape(a.shape, b.shape)
    if b_hat is None:
        b_hat = scipy.fft.rfftn(b, shape)
    full = scipy.fft.irfftn(scipy.fft.rfftn(a, shape) * b_hat, shape)
    sl = tuple(slice(o, o + n) for o, n in zip(origin, a.shape))
    return full[sl]


def _conv_same_adjoint(r, b, origin=None, b_hat_conj=None):
    """Adjoint of :func:`_conv_same` with respect to its first argument."""
    if origin is None:
        origin = default_origin(b.shape)
    shape = fft_shape(r.shape, b.shape)
    if b_hat_conj is None:
        b_hat_conj = np.conj(scipy.fft.rfftn(b, shape))
    # correlation: out[j] = sum_i r[i] b[i - j + origin]
    full = scipy.fft.irfftn(scipy.fft.rfftn(r, shape) * b_hat_conj, shape)
    idx = [(np.arange(n) - o) % s for n, o, s in zip(r.shape, origin, shape)]
    return full[np.ix_(*idx)]


def _require_same_sampling(a, b):
    if not (np.isclose(a.pixel_size, b.pixel_size) and np.isclose(a.bin_width, b.bin_width)):
        raise ValueError(
            "conv3d operands disagree on sampling: "
            f"pixel_size {a.pixel_size} vs {b.pixel_size} mm, "
            f"bin_width {a.bin_width} vs {b.bin_width} ps"
        )


def conv3d(a, b, origin=None):
    """Zero-padded linear 3D convolution of ``a`` with kernel ``b``.

    The result has the shape of ``a``. The kernel origin defaults to the
    spatial center of ``b`` at its first time bin, so a kernel holding a unit
    impulse at that voxel leaves ``a`` unchanged.
    """
    _require_same_sampling(a, b)
    return a.with_data(_conv_same(a.data, b.data, origin))


def conv3d_adjoint(r, b, origin=None):
    """Adjoint of ``conv3d(., b)``: correlation of ``r`` with ``b``."""
    _require_same_sampling(r, b)
    return r.with_data(_conv_same_adjoint(r.data, b.data, origin))


def multiply_mask(v, t):
    """Multiply every time bin of ``v`` by the 2D mask ``t``."""
    if (v.nx, v.ny) != (t.nx, t.ny):
        raise ValueError(f"mask shape {t.shape} does not match volume (nx, ny) = {(v.nx, v.ny)}")
    if not np.isclose(v.pixel_size, t.pixel_size):
        raise ValueError(f"mask pixel_size {t.pixel_size} != volume pixel_size {v.pixel_size}")
    return v.with_data(v.data * t.data[:, :, None])


def integrate_time(v):
    """Sum over time bins, giving the time-averaged (unnormalized) frame."""
    return Image2D(v.data.sum(axis=2), v.pixel_size)


def vec(array):
    """Flatten in x-fastest order."""
    return np.asarray(array).ravel(order="F")


def unvec(vector, shape):
    return np.asarray(vector).reshape(shape, order="F")


def vec_normalized(v):
    """Flatten ``v`` (x-fastest) and scale to unit Euclidean norm."""
    data = v.data if isinstance(v, (Volume3D, Image2D)) else np.asarray(v, dtype=float)
    flat = vec(data)
    norm = np.linalg.norm(flat)
    if norm == 0.0:
        raise ValueError("cannot normalize an all-zero volume")
    return flat / norm
