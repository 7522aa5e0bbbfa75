"""Composed transmission model: illumination, source-side slab, mask, detector-side slab.

``m = ((I * K1) . T) * K2`` where ``*`` is the 3D convolution of
:mod:`allphotons.tensor` and ``.`` multiplies every time bin by the mask.
The detector-side kernel is sampled at bin starts by default so that a
photon history assigned to bins ``k1`` and ``k2`` lands at the center of bin
``k1 + k2`` (both kernels at bin centers would add half a bin of delay).
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .diffusion import OpticalProperties, SceneGeometry, kernel_array
from .dual import Dual
from .tensor import Image2D, Volume3D, _conv_same, default_origin, fft_shape

__all__ = ["ForwardScene", "ForwardDiagnostics", "predict", "predict_dual", "predict_with_diagnostics"]

NEGATIVE_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class ForwardScene:
    """Everything the composed model needs besides the optical properties' derivative seed.

    ``k2_time_offset`` is the sampling phase of the detector-side kernel in
    bins; 0.5 samples both kernels at bin centers.
    """

    illumination: Volume3D
    geometry: SceneGeometry
    props: OpticalProperties
    mask: Image2D
    image_pairs: object = None
    radius: str = "lateral"
    k2_time_offset: float = 0.0

    def __post_init__(self):
        geo = self.geometry
        if self.illumination.shape != geo.shape:
            raise ValueError(f"illumination shape {self.illumination.shape} != grid {geo.shape}")
        if self.mask.shape != (geo.nx, geo.ny):
            raise ValueError(f"mask shape {self.mask.shape} != grid {(geo.nx, geo.ny)}")
        for name, obj in (("illumination", self.illumination), ("mask", self.mask)):
            if not np.isclose(obj.pixel_size, geo.pixel_size):
                raise ValueError(f"{name} pixel_size {obj.pixel_size} != grid {geo.pixel_size}")
        if not np.isclose(self.illumination.bin_width, geo.bin_width):
            raise ValueError("illumination bin_width does not match the grid")
        if np.any(self.mask.data < 0) or np.any(self.mask.data > 1):
            raise ValueError("mask values must lie in [0, 1]")

    def with_mask(self, mask):
        if not isinstance(mask, Image2D):
            mask = Image2D(mask, self.geometry.pixel_size)
        return _replace(self, mask=mask)

    def with_props(self, props):
        return _replace(self, props=props)

    def kernels(self, props=None):
        """Sampled ``(K1, K2)`` arrays, Dual when ``props`` carries a seeded mu_s'."""
        props = self.props if props is None else props
        geo = self.geometry
        k1 = kernel_array(props, geo.d1, geo, self.image_pairs, self.radius, 0.5)
        k2 = kernel_array(props, geo.d2, geo, self.image_pairs, self.radius, self.k2_time_offset)
        return k1, k2


def _replace(scene, **changes):
    fields = dict(scene.__dict__)
    fields.update(changes)
    return ForwardScene(**fields)


@dataclass(frozen=True)
class ForwardDiagnostics:
    """Magnitude of FFT round-off negatives that were clamped to zero."""

    max_negative: float
    peak: float

    @property
    def relative(self):
        return self.max_negative / self.peak if self.peak > 0 else 0.0


# FFT convolution error is bounded by a small multiple of eps * ||a|| * ||b||;
# outputs below this floor are indistinguishable from zero.
ROUNDOFF_FLOOR = 1e-13


class _Convolver:
    """Same-size linear convolution with cached kernel spectra."""

    def __init__(self, shape):
        self.shape = shape
        self.fshape = fft_shape(shape, shape)
        self.origin = default_origin(shape)

    def spectrum(self, a):
        return scipy.fft.rfftn(a, self.fshape)

    def apply(self, a_hat):
        full = scipy.fft.irfftn(a_hat, self.fshape)
        o = self.origin
        return full[o[0]:o[0] + self.shape[0], o[1]:o[1] + self.shape[1], o[2]:o[2] + self.shape[2]]


def _denoise(values, scale):
    # zero the entries that lie within FFT round-off of zero
    return np.where(np.abs(values) > ROUNDOFF_FLOOR * scale, values, 0.0)


def _clamp(values):
    peak = float(values.max()) if values.size else 0.0
    neg = float(-values.min()) if values.size and values.min() < 0 else 0.0
    return np.maximum(values, 0.0), ForwardDiagnostics(neg, max(peak, 0.0))


def source_response(conv, illumination, k1):
    """``I * K1`` with round-off noise removed (arrays, not duals)."""
    g = conv.apply(conv.spectrum(illumination) * conv.spectrum(k1))
    return _denoise(g, np.linalg.norm(illumination) * np.linalg.norm(k1))


def _compose(scene, k1, k2):
    conv = _Convolver(scene.geometry.shape)
    T = scene.mask.data[:, :, None]
    illum = scene.illumination.data
    i_hat = conv.spectrum(illum)
    n_i = np.linalg.norm(illum)
    nrm = np.linalg.norm
    if isinstance(k1, Dual):
        xv = _denoise(conv.apply(i_hat * conv.spectrum(k1.value)), n_i * nrm(k1.value)) * T
        xd = _denoise(conv.apply(i_hat * conv.spectrum(k1.deriv)), n_i * nrm(k1.deriv)) * T
        k2v_hat, k2d_hat = conv.spectrum(k2.value), conv.spectrum(k2.deriv)
        xv_hat, xd_hat = conv.spectrum(xv), conv.spectrum(xd)
        value = _denoise(conv.apply(xv_hat * k2v_hat), nrm(xv) * nrm(k2.value))
        deriv = _denoise(conv.apply(xd_hat * k2v_hat + xv_hat * k2d_hat),
                         nrm(xd) * nrm(k2.value) + nrm(xv) * nrm(k2.deriv))
        return value, deriv
    x = _denoise(conv.apply(i_hat * conv.spectrum(k1)), n_i * nrm(k1)) * T
    return _denoise(conv.apply(conv.spectrum(x) * conv.spectrum(k2)), nrm(x) * nrm(k2)), None


def _warn_negatives(diag):
    if diag.relative > NEGATIVE_TOLERANCE:
        warnings.warn(
            f"forward model produced negatives of relative size {diag.relative:.3g}; clamped to zero",
            RuntimeWarning,
            stacklevel=3,
        )


def predict_with_diagnostics(scene):
    """:func:`predict` plus the clamping diagnostic."""
    k1, k2 = scene.kernels()
    raw, _ = _compose(scene, k1, k2)
    out, diag = _clamp(raw)
    _warn_negatives(diag)
    geo = scene.geometry
    return Volume3D(out, geo.pixel_size, geo.bin_width), diag


def predict(scene):
    """Predicted time-resolved measurement on the scene grid."""
    return predict_with_diagnostics(scene)[0]


def predict_dual(scene, seed=1.0):
    """Prediction and its derivative with respect to mu_s'.

    ``seed`` scales the derivative direction; ``seed=0`` yields an all-zero
    derivative. The value volume equals :func:`predict`.
    """
    props = scene.props
    mu = Dual(float(props.mu_s_prime), float(seed))
    k1, k2 = scene.kernels(props.with_mu_s_prime(mu))
    value, deriv = _compose(scene, k1, k2)
    out, diag = _clamp(value)
    _warn_negatives(diag)
    deriv = np.where(value < 0, 0.0, deriv)
    geo = scene.geometry
    return (Volume3D(out, geo.pixel_size, geo.bin_width),
            Volume3D(deriv, geo.pixel_size, geo.bin_width))


def default_scene(geometry=None, props=None, mask=None, irf_fwhm=None, spot_sigma=None, **kwargs):
    """Scene with a point illumination at the geometry's source pixel."""
    geometry = SceneGeometry() if geometry is None else geometry
    props = OpticalProperties(0.01, 2.0) if props is None else props
    if mask is None:
        mask = np.ones((geometry.nx, geometry.ny))
    if not isinstance(mask, Image2D):
        mask = Image2D(mask, geometry.pixel_size)
    illum = geometry.illumination(spot_sigma=spot_sigma, irf_fwhm=irf_fwhm)
    return ForwardScene(illum, geometry, props, mask, **kwargs)
