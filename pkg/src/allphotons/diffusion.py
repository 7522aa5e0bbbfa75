"""Diffusion-approximation kernels for time-resolved photon transport.

Units throughout: lengths in mm, times in ps, coefficients in 1/mm.

Every kernel accepts plain floats/arrays or :class:`~allphotons.dual.Dual`
values for the optical coefficients, so derivatives with respect to the
reduced scattering coefficient come out of the same code path.
"""

from dataclasses import dataclass, field

import numpy as np

from . import dual as dm
from .dual import Dual, value_of
from .tensor import Volume3D

__all__ = [
    "C_VACUUM",
    "OpticalProperties",
    "SceneGeometry",
    "fluence_infinite",
    "slab_bracket",
    "slab_kernel_value",
    "log_abs_slab_kernel",
    "kernel_array",
    "sample_kernel",
    "log_slope_late",
    "late_window",
]

C_VACUUM = 0.299792458  # mm / ps

# Terms smaller than exp(-_SERIES_CUTOFF) relative to unity are dropped.
_SERIES_CUTOFF = 42.0


@dataclass(frozen=True)
class OpticalProperties:
    """Homogeneous medium: absorption, reduced scattering, anisotropy, index.

    ``mu_s_prime`` may be a :class:`Dual` to carry d/d(mu_s_prime).
    """

    mu_a: float
    mu_s_prime: object
    g: float = 0.9
    refractive_index: float = 1.4

    def __post_init__(self):
        mua = float(value_of(self.mu_a))
        musp = float(value_of(self.mu_s_prime))
        if not (np.isfinite(mua) and np.isfinite(musp)):
            raise ValueError("optical coefficients must be finite")
        if mua < 0:
            raise ValueError(f"mu_a must be >= 0, got {mua}")
        if musp <= 0:
            raise ValueError(f"mu_s_prime must be > 0, got {musp}")
        if not 0.0 <= self.g < 1.0:
            raise ValueError(f"g must lie in [0, 1), got {self.g}")
        if not self.refractive_index >= 1.0:
            raise ValueError(f"refractive_index must be >= 1, got {self.refractive_index}")

    @classmethod
    def from_scattering(cls, mu_s, g, mu_a, refractive_index=1.4):
        return cls(mu_a=mu_a, mu_s_prime=mu_s * (1.0 - g), g=g, refractive_index=refractive_index)

    @property
    def c(self):
        """Speed of light in the medium, mm/ps."""
        return C_VACUUM / self.refractive_index

    @property
    def D(self):
        """Diffusion coefficient 1 / (3 (mu_a + mu_s')), mm."""
        return 1.0 / (3.0 * (self.mu_a + self.mu_s_prime))

    @property
    def z0(self):
        """Depth of the equivalent isotropic source, 1 / mu_s', mm."""
        return 1.0 / self.mu_s_prime

    @property
    def mu_s(self):
        return value_of(self.mu_s_prime) / (1.0 - self.g)

    def with_mu_s_prime(self, mu_s_prime):
        return OpticalProperties(self.mu_a, mu_s_prime, self.g, self.refractive_index)

    def with_mu_a(self, mu_a):
        return OpticalProperties(mu_a, self.mu_s_prime, self.g, self.refractive_index)


@dataclass(frozen=True)
class SceneGeometry:
    """Slab thicknesses around the target plane and the detector sampling grid.

    Pixel ``i`` is centered at ``(i - nx // 2) * pixel_size``, so the grid
    midpoint pixel sits at x = 0. Time bin ``k`` covers
    ``[k, k + 1) * bin_width`` and is represented by its center.
    """

    d1: float = 13.0
    d2: float = 13.0
    nx: int = 32
    ny: int = 32
    pixel_size: float = 2.0
    nt: int = 60
    bin_width: float = 50.0
    source_pixel: tuple = field(default=None)
    source_bin: int = 0

    def __post_init__(self):
        if not (self.d1 > 0 and self.d2 > 0):
            raise ValueError(f"slab thicknesses must be positive, got d1={self.d1}, d2={self.d2}")
        if min(self.nx, self.ny, self.nt) < 1:
            raise ValueError("grid sizes must be positive")
        if not (self.pixel_size > 0 and self.bin_width > 0):
            raise ValueError("pixel_size and bin_width must be positive")
        if self.source_pixel is None:
            object.__setattr__(self, "source_pixel", (self.nx // 2, self.ny // 2))
        sx, sy = self.source_pixel
        if not (0 <= sx < self.nx and 0 <= sy < self.ny):
            raise ValueError(f"source_pixel {self.source_pixel} outside the grid")
        object.__setattr__(self, "source_pixel", (int(sx), int(sy)))
        if not 0 <= self.source_bin < self.nt:
            raise ValueError(f"source_bin {self.source_bin} outside [0, {self.nt})")

    @property
    def thickness(self):
        return self.d1 + self.d2

    @property
    def shape(self):
        return (self.nx, self.ny, self.nt)

    def x_centers(self):
        return (np.arange(self.nx) - self.nx // 2) * self.pixel_size

    def y_centers(self):
        return (np.arange(self.ny) - self.ny // 2) * self.pixel_size

    def t_centers(self):
        return (np.arange(self.nt) + 0.5) * self.bin_width

    def source_position(self):
        """(x, y) in mm of the illumination spot center."""
        sx, sy = self.source_pixel
        return float(self.x_centers()[sx]), float(self.y_centers()[sy])

    def illumination(self, spot_sigma=None, irf_fwhm=None):
        """Illumination volume: a spot at ``source_pixel`` fired at ``source_bin``.

        ``spot_sigma`` (mm) widens the spot into a Gaussian; ``irf_fwhm`` (ps)
        spreads the pulse with a Gaussian instrument response.
        """
        data = np.zeros(self.shape)
        sx, sy = self.source_pixel
        if spot_sigma:
            x0, y0 = self.source_position()
            gx = np.exp(-0.5 * ((self.x_centers() - x0) / spot_sigma) ** 2)
            gy = np.exp(-0.5 * ((self.y_centers() - y0) / spot_sigma) ** 2)
            spatial = np.outer(gx, gy)
            spatial /= spatial.sum()
        else:
            spatial = np.zeros((self.nx, self.ny))
            spatial[sx, sy] = 1.0
        if irf_fwhm:
            sigma = irf_fwhm / (2.0 * np.sqrt(2.0 * np.log(2.0)))
            k = np.arange(self.nt)
            pulse = np.exp(-0.5 * ((k - self.source_bin) * self.bin_width / sigma) ** 2)
            pulse /= pulse.sum()
        else:
            pulse = np.zeros(self.nt)
            pulse[self.source_bin] = 1.0
        data[:] = spatial[:, :, None] * pulse[None, None, :]
        return Volume3D(data, self.pixel_size, self.bin_width)


def fluence_infinite(r, t, props):
    """Fluence rate of a short isotropic pulse in an infinite medium."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("fluence_infinite requires t > 0")
    c = props.c
    D = props.D
    four_dct = 4.0 * D * c * t
    return c * (np.pi * four_dct) ** -1.5 * dm.exp(-(np.asarray(r, dtype=float) ** 2) / four_dct - props.mu_a * c * t)


def _where(cond, a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        av, ad = value_of(a), dm.deriv_of(a)
        bv, bd = value_of(b), dm.deriv_of(b)
        shape = np.broadcast_shapes(np.shape(cond), np.shape(av), np.shape(bv))
        return Dual(np.where(cond, av, bv), np.where(cond, np.broadcast_to(ad, shape), np.broadcast_to(bd, shape)))
    return np.where(cond, a, b)


def _bracket_images(a, d, z0, pairs):
    total = 0.0
    for k in range(pairs):
        q1 = (2 * k + 1) * d - z0
        q2 = (2 * k + 1) * d + z0
        total = total + q1 * dm.exp(-q1 * q1 / a) - q2 * dm.exp(-q2 * q2 / a)
    return total


def _bracket_modes(a, d, z0, modes):
    # Poisson-summed form of the complete image series; fast at late times.
    total = 0.0
    for m in range(1, modes + 1):
        sign = 1.0 if m % 2 else -1.0
        total = total + sign * m * dm.sin(np.pi * m * z0 / d) * dm.exp(-(np.pi * m / (2.0 * d)) ** 2 * a)
    return (np.pi ** 1.5 / (2.0 * d * d)) * a ** 1.5 * total


def slab_bracket(t, props, d, image_pairs=None):
    """Image-source sum of the slab transmittance kernel.

    With ``image_pairs=2`` this is the four-term bracket with offsets
    ``d -/+ z0`` and ``3d -/+ z0``. ``image_pairs=None`` sums the series to
    convergence, switching to its eigenmode form once ``4 D c t > d**2``.
    """
    t = np.asarray(t, dtype=float)
    a = 4.0 * props.D * props.c * t
    z0 = props.z0
    if image_pairs is not None:
        return _bracket_images(a, d, z0, int(image_pairs))
    av = np.asarray(value_of(a))
    z0v = float(value_of(z0))
    early = av <= d * d
    a_hi = float(av[early].max()) if np.any(early) else 0.0
    a_lo = float(av[~early].min()) if np.any(~early) else d * d
    pairs = max(2, int(np.ceil(((np.sqrt(_SERIES_CUTOFF * a_hi) + z0v) / d - 1.0) / 2.0)) + 1)
    modes = max(1, int(np.ceil(2.0 * d / np.pi * np.sqrt(_SERIES_CUTOFF / a_lo))) + 1)
    if np.all(early):
        return _bracket_images(a, d, z0, pairs)
    if not np.any(early):
        return _bracket_modes(a, d, z0, modes)
    return _where(early, _bracket_images(a, d, z0, pairs), _bracket_modes(a, d, z0, modes))


def slab_kernel_value(x, y, t, props, d, image_pairs=None, radius="lateral", allow_negative=False):
    """Time-resolved transmittance of a homogeneous slab of thickness ``d``.

    ``(x, y)`` is the lateral offset from the entry point. ``radius`` picks
    the Gaussian radius: ``"lateral"`` uses ``x**2 + y**2``; ``"depth"`` also
    adds ``d**2``. A negative bracket (which the truncated four-term series
    develops at late times) raises unless ``allow_negative`` is set.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("slab_kernel_value requires t > 0")
    if not (np.isfinite(d) and d > 0):
        raise ValueError(f"slab thickness must be positive and finite, got {d}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite lateral coordinates")
    if radius == "lateral":
        r2 = x * x + y * y
    elif radius == "depth":
        r2 = x * x + y * y + d * d
    else:
        raise ValueError(f"radius must be 'lateral' or 'depth', got {radius!r}")
    c = props.c
    D = props.D
    bracket = slab_bracket(t, props, d, image_pairs)
    if not allow_negative and np.any(np.asarray(value_of(bracket)) < 0):
        raise ValueError(
            "slab kernel bracket changed sign; the truncated image series is "
            f"invalid at these times (d={d}, mu_s'={float(value_of(props.mu_s_prime)):.4g})"
        )
    a = 4.0 * D * c * t
    out = (4.0 * np.pi * D * c) ** -1.5 * t ** -2.5 * np.exp(-props.mu_a * c * t) * dm.exp(-r2 / a) * bracket
    if isinstance(out, Dual):
        if not (np.all(np.isfinite(out.value)) and np.all(np.isfinite(out.deriv))):
            raise ValueError("slab kernel evaluated to non-finite values")
    elif not np.all(np.isfinite(out)):
        raise ValueError("slab kernel evaluated to non-finite values")
    return out


def _log_abs_bracket(t, props, d, image_pairs):
    # log|bracket| and its sign, stable where the exponentials underflow
    a = 4.0 * props.D * props.c * np.asarray(t, dtype=float)
    z0 = props.z0
    if image_pairs is None:
        # first eigenmode dominates the converged series at late times
        modes = 64
        m = np.arange(1, modes + 1)[:, None]
        lead = -(np.pi / (2.0 * d)) ** 2 * a
        rel = ((-1.0) ** (m + 1)) * m * np.sin(np.pi * m * z0 / d) * np.exp(-(np.pi * m / (2.0 * d)) ** 2 * a - lead)
        total = rel.sum(axis=0)
        log_pref = np.log(np.pi ** 1.5 / (2.0 * d * d)) + 1.5 * np.log(a) + lead
        # switch to the image form where it is cheaper and accurate
        early = a <= d * d
        if np.any(early):
            vals = slab_bracket(np.asarray(t, dtype=float)[early], props, d)
            total = total.astype(float)
            log_pref = log_pref.astype(float)
            total[early] = np.sign(vals)
            log_pref[early] = np.log(np.abs(vals))
        return log_pref + np.log(np.abs(total)), np.sign(total)
    k = np.arange(int(image_pairs))[:, None]
    q = np.concatenate([(2 * k + 1) * d - z0, -((2 * k + 1) * d + z0)])
    expo = -(q * q) / a
    top = expo.max(axis=0)
    total = np.sum(q * np.exp(expo - top), axis=0)
    return top + np.log(np.abs(total)), np.sign(total)


def log_abs_slab_kernel(x, y, t, props, d, image_pairs=None, radius="lateral"):
    """``(log|K|, sign(K))`` for the slab kernel, usable far past underflow."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("log_abs_slab_kernel requires t > 0")
    r2 = np.asarray(x, dtype=float) ** 2 + np.asarray(y, dtype=float) ** 2
    if radius == "depth":
        r2 = r2 + d * d
    elif radius != "lateral":
        raise ValueError(f"radius must be 'lateral' or 'depth', got {radius!r}")
    c, D = props.c, props.D
    log_b, sign = _log_abs_bracket(t, props, d, image_pairs)
    log_k = (-1.5 * np.log(4.0 * np.pi * D * c) - 2.5 * np.log(t) - props.mu_a * c * t
             - r2 / (4.0 * D * c * t) + log_b)
    return log_k, sign


def kernel_array(props, d, geometry, image_pairs=None, radius="lateral", time_offset=0.5):
    """Sampled kernel as an ``(nx, ny, nt)`` array (or a Dual of arrays).

    Lateral coordinates are pixel centers relative to the grid midpoint.
    Bin ``k`` is sampled at ``(k + time_offset) * bin_width``; bins with
    ``t <= 0`` are zero.
    """
    if radius not in ("lateral", "depth"):
        raise ValueError(f"radius must be 'lateral' or 'depth', got {radius!r}")
    x = geometry.x_centers()[:, None, None]
    y = geometry.y_centers()[None, :, None]
    t_all = (np.arange(geometry.nt) + time_offset) * geometry.bin_width
    live = t_all > 0
    t = t_all[live]
    c = props.c
    D = props.D
    bracket = slab_bracket(t, props, d, image_pairs)
    if np.any(np.asarray(value_of(bracket)) < 0):
        raise ValueError(
            f"slab kernel bracket changed sign within the time window (d={d}, "
            f"mu_s'={float(value_of(props.mu_s_prime)):.4g}); use the converged series"
        )
    r2 = x * x + y * y + (d * d if radius == "depth" else 0.0)
    a = 4.0 * D * c * t
    # the lateral Gaussian is the only (x, y, t) coupled factor
    temporal = (4.0 * np.pi * D * c) ** -1.5 * t ** -2.5 * np.exp(-props.mu_a * c * t) * bracket
    out = dm.exp(-r2 / a) * temporal
    shape = geometry.shape
    if isinstance(out, Dual):
        value = np.zeros(shape)
        deriv = np.zeros(shape)
        value[:, :, live] = out.value
        deriv[:, :, live] = np.broadcast_to(out.deriv, np.shape(out.value))
        return Dual(value, deriv)
    full = np.zeros(shape)
    full[:, :, live] = out
    return full


def sample_kernel(props, d, geometry, image_pairs=None, radius="lateral", time_offset=0.5):
    """Slab kernel sampled on the scene grid as a :class:`Volume3D`."""
    data = kernel_array(props, d, geometry, image_pairs, radius, time_offset)
    if isinstance(data, Dual):
        raise TypeError("sample_kernel is real-valued; use kernel_array for dual evaluation")
    return Volume3D(data, geometry.pixel_size, geometry.bin_width)


def log_slope_late(values, t, window=None):
    """Least-squares slope of ``log(values)`` against ``t`` (1/ps).

    ``window`` is any index (slice, boolean mask, index array) selecting the
    bins to fit; all selected values must be strictly positive.
    """
    values = np.asarray(values, dtype=float)
    t = np.asarray(t, dtype=float)
    if window is not None:
        values = values[window]
        t = t[window]
    if values.size < 2:
        raise ValueError("need at least two bins to fit a slope")
    if np.any(~(values > 0)):
        raise ValueError("log-slope window contains nonpositive values")
    return float(np.polyfit(t, np.log(values), 1)[0])


def late_window(histogram, fraction=0.25, noise_factor=5.0, lead_bins=None, min_bins=3):
    """Indices of the late-time bins used for the absorption slope.

    The noise floor is the smallest of the leading bins before the peak,
    which precede photon arrival in transmission (a median would read a
    diffusion model's rising edge as noise). Candidate bins follow the
    histogram peak and exceed ``noise_factor`` times that floor; the last ``fraction`` of them
    (at least ``min_bins``) form the window. Raises when too few remain.
    """
    h = np.asarray(histogram, dtype=float)
    nt = h.size
    if lead_bins is None:
        lead_bins = max(2, nt // 20)
    peak = int(np.argmax(h))
    # only bins before the peak can be pre-arrival; without any, the global
    # minimum is the conservative floor (a flat histogram then has no window)
    lead = h[:min(lead_bins, peak)]
    floor = float(np.min(lead)) if lead.size else float(np.min(h))
    threshold = max(noise_factor * floor, 0.0)
    candidates = np.flatnonzero((h > threshold) & (h > 0) & (np.arange(nt) > peak))
    if candidates.size < min_bins:
        raise ValueError("insufficient SNR for absorption estimation")
    count = max(min_bins, int(round(fraction * candidates.size)))
    return candidates[-count:]
