"""Joint recovery of the absorption, the reduced scattering and the mask.

Absorption comes from the late-time log slope of the spatially summed
histogram. The reduced scattering coefficient is fitted by RMSProp on the
data term, with its derivative carried by dual numbers through the forward
model. Mask updates use ADMM on the normalized linear system.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import dual as dm
from .diffusion import C_VACUUM, OpticalProperties, late_window, log_slope_late
from .dual import RMSProp, rmsprop_step
from .forward import ForwardScene, predict, predict_dual
from .reconstruction import AdmmConfig, NumericalFailure, SystemMatrix, admm_solve
from .tensor import Image2D, integrate_time

__all__ = [
    "EstimationConfig",
    "EstimationReport",
    "InsufficientSNR",
    "estimate_mu_a",
    "refine_mu_a",
    "initial_mask",
    "loss_and_grad",
    "estimate_mu_s",
    "alternate",
]


class InsufficientSNR(ValueError):
    """No usable late-time window for the absorption slope."""


@dataclass(frozen=True)
class EstimationConfig:
    mu_s_init: float = 1.5
    step_size: float = 5e-2
    mu_s_iters: int = 300
    target_iters: int = 50
    outer_alternations: int = 3
    rel_tol: float = 1e-4
    decay: float = 0.9
    epsilon: float = 1e-8
    mu_s_bounds: tuple = (0.1, 10.0)
    normalize_loss: bool = True
    slope_fraction: float = 0.25
    noise_factor: float = 5.0
    mu_a_mode: str = "model_corrected"
    admm: AdmmConfig = field(default_factory=AdmmConfig.simulation)

    def __post_init__(self):
        for name in ("mu_s_iters", "target_iters", "outer_alternations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive count")
        for name in ("mu_s_init", "step_size", "rel_tol", "epsilon", "slope_fraction", "noise_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        lo, hi = self.mu_s_bounds
        if not 0 < lo < hi:
            raise ValueError("mu_s_bounds must satisfy 0 < lo < hi")
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        if self.mu_a_mode not in ("slope", "model_corrected"):
            raise ValueError("mu_a_mode must be 'slope' or 'model_corrected'")


@dataclass(frozen=True, eq=False)
class EstimationReport:
    """Outcome of :func:`alternate`; ``timings`` is wall-clock seconds per phase."""

    mu_a_hat: float
    mu_s_prime_hat: float
    loss_trajectory: list
    mask: Image2D
    admm_objective: list
    timings: dict
    mu_a_slope: float = float("nan")

    def phases(self):
        """Loss values grouped by mu_s' phase."""
        out = {}
        for phase, _it, _mu, loss in self.loss_trajectory:
            out.setdefault(phase, []).append(loss)
        return [out[k] for k in sorted(out)]


def _histogram(m):
    data = m.data if hasattr(m, "data") else np.asarray(m, dtype=float)
    return data.sum(axis=(0, 1)) if data.ndim == 3 else data


def estimate_mu_a(m, refractive_index=1.4, bin_width=None, fraction=0.25, noise_factor=5.0, window=None):
    """Absorption from the late-time decay of the spatially summed histogram.

    ``mu_a = -slope / c`` with ``slope`` fitted to ``log(histogram)`` over the
    late window, clamped at zero.
    """
    hist = _histogram(m)
    if bin_width is None:
        bin_width = m.bin_width
    t = (np.arange(hist.size) + 0.5) * bin_width
    if window is None:
        try:
            window = late_window(hist, fraction=fraction, noise_factor=noise_factor)
        except ValueError as exc:
            raise InsufficientSNR(str(exc)) from None
    slope = log_slope_late(hist, t, window)
    c = C_VACUUM / refractive_index
    return max(0.0, -slope / c)


def refine_mu_a(measurement, scene, fraction=0.25, noise_factor=5.0):
    """Late-slope absorption corrected for the model's own non-absorptive decay.

    The raw slope also contains the diffusive escape rate of the slabs, which
    does not vanish at any finite time. The model at the scene's current
    ``mu_a`` predicts the full slope over the same window, so
    ``mu_a - (slope_measured - slope_model) / c`` removes that term.
    """
    hist = _histogram(measurement)
    try:
        window = late_window(hist, fraction=fraction, noise_factor=noise_factor)
    except ValueError as exc:
        raise InsufficientSNR(str(exc)) from None
    t = (np.arange(hist.size) + 0.5) * measurement.bin_width
    model = _histogram(predict(scene))
    if np.any(model[window] <= 0):
        raise InsufficientSNR("model prediction vanishes inside the late window")
    s_meas = log_slope_late(hist, t, window)
    s_model = log_slope_late(model, t, window)
    return max(0.0, float(scene.props.mu_a) - (s_meas - s_model) / scene.props.c)


def loss_and_grad(mu_s_prime, scene, measurement, normalize=True):
    """Data term and its derivative with respect to mu_s'.

    With ``normalize`` both prediction and measurement are scaled to unit
    norm first, which removes the unknown source power.
    """
    if measurement.shape != scene.geometry.shape:
        raise ValueError(f"measurement shape {measurement.shape} != model grid {scene.geometry.shape}")
    value, deriv = predict_dual(scene.with_props(scene.props.with_mu_s_prime(float(mu_s_prime))))
    p = dm.Dual(value.data, deriv.data)
    f = measurement.data
    if normalize:
        f = f / np.linalg.norm(f)
        p = p / dm.sqrt(dm.sum(p * p))
    r = p - f
    loss = dm.sum(r * r)
    return float(loss.value), float(loss.deriv)


def estimate_mu_s(measurement, scene, config=None, mu_init=None, phase=0, trajectory=None):
    """RMSProp fit of mu_s' with the mask and mu_a of ``scene`` held fixed.

    Runs until ``mu_s_iters`` steps or a relative parameter change below
    ``rel_tol``, and returns the lowest-loss iterate visited.
    """
    cfg = EstimationConfig() if config is None else config
    mu = float(cfg.mu_s_init if mu_init is None else mu_init)
    lo, hi = cfg.mu_s_bounds
    state = RMSProp(cfg.step_size, cfg.decay, cfg.epsilon)
    best_mu, best_loss = mu, np.inf
    for it in range(cfg.mu_s_iters):
        loss, grad = loss_and_grad(mu, scene, measurement, cfg.normalize_loss)
        if not (np.isfinite(loss) and np.isfinite(grad)):
            raise NumericalFailure(f"non-finite loss or gradient at mu_s'={mu!r}")
        if trajectory is not None:
            trajectory.append((phase, it, mu, loss))
        if loss < best_loss:
            best_mu, best_loss = mu, loss
        state, new_mu = rmsprop_step(state, mu, grad)
        new_mu = float(min(hi, max(lo, new_mu)))
        change = abs(new_mu - mu) / abs(mu)
        mu = new_mu
        if change < cfg.rel_tol:
            break
    loss, _ = loss_and_grad(mu, scene, measurement, cfg.normalize_loss)
    if loss < best_loss:
        best_mu = mu
    return best_mu


def initial_mask(measurement):
    """Time-averaged frame scaled to a peak of one."""
    frame = integrate_time(measurement).data
    peak = frame.max()
    if not peak > 0:
        raise InsufficientSNR("measurement has no positive counts")
    return Image2D(np.clip(frame / peak, 0.0, 1.0), measurement.pixel_size)


def alternate(measurement, scene, config=None, init_mask=None):
    """Estimate mu_a, then alternate mu_s' fitting and ADMM mask updates.

    With ``mu_a_mode="model_corrected"`` the slope estimate is refined by
    :func:`refine_mu_a` against the starting model and again after every mu_s'
    phase; ``"slope"`` keeps the raw value.

    ``scene`` supplies illumination, geometry and the refractive index; its
    mask and optical coefficients are overwritten by the estimates. The mask
    starts from the time-averaged frame unless ``init_mask`` is given.
    """
    cfg = EstimationConfig() if config is None else config
    timings = {}
    t0 = time.perf_counter()
    n_index = scene.props.refractive_index
    mu_a = mu_a_slope = estimate_mu_a(measurement, n_index, fraction=cfg.slope_fraction,
                                      noise_factor=cfg.noise_factor)
    if init_mask is None:
        mask = initial_mask(measurement)
    else:
        mask = init_mask if isinstance(init_mask, Image2D) else Image2D(init_mask, measurement.pixel_size)
    props = OpticalProperties(mu_a, cfg.mu_s_init, scene.props.g, n_index)
    scene = ForwardScene(scene.illumination, scene.geometry, props, mask,
                         scene.image_pairs, scene.radius, scene.k2_time_offset)
    if cfg.mu_a_mode == "model_corrected":
        mu_a = refine_mu_a(measurement, scene, cfg.slope_fraction, cfg.noise_factor)
        scene = scene.with_props(scene.props.with_mu_a(mu_a))
    timings["mu_a"] = time.perf_counter() - t0
    b = measurement.data.ravel(order="F")
    b = b / np.linalg.norm(b)
    admm_cfg = AdmmConfig(cfg.admm.rho, cfg.admm.lambda1, cfg.admm.lambda2, cfg.target_iters,
                          cfg.admm.abstol, cfg.admm.reltol, cfg.admm.cg_tol, cfg.admm.cg_maxiter)
    prior = admm_cfg.prior(scene.geometry.nx, scene.geometry.ny)
    trajectory, objective = [], []
    mu = cfg.mu_s_init
    for k in range(cfg.outer_alternations):
        t0 = time.perf_counter()
        mu = estimate_mu_s(measurement, scene, cfg, mu_init=mu, phase=k, trajectory=trajectory)
        scene = scene.with_props(scene.props.with_mu_s_prime(mu))
        if cfg.mu_a_mode == "model_corrected":
            mu_a = refine_mu_a(measurement, scene, cfg.slope_fraction, cfg.noise_factor)
            scene = scene.with_props(scene.props.with_mu_a(mu_a))
        timings[f"mu_s_{k}"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        A = SystemMatrix(scene)
        # column norms depend on mu_s', so re-express the mask in this round's coordinates
        init = A.from_mask(scene.mask)
        info = admm_solve(A, b, prior, admm_cfg, init=init, clamp=False, return_info=True)
        objective.extend(info.objective)
        scene = scene.with_mask(A.to_mask(info.v_raw))
        timings[f"target_{k}"] = time.perf_counter() - t0
    return EstimationReport(mu_a, mu, trajectory, scene.mask, objective, timings, mu_a_slope)
