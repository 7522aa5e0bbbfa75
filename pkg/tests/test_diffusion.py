import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from allphotons.diffusion import (C_VACUUM, OpticalProperties, SceneGeometry, fluence_infinite, kernel_array,
                                  late_window, log_abs_slab_kernel, log_slope_late, sample_kernel, slab_bracket,
                                  slab_kernel_value)
from allphotons.dual import Dual

mp.mp.dps = 50
BASE = OpticalProperties(0.01, 2.0, 0.9, 1.4)


def mp_consts(props):
    c = mp.mpf(C_VACUUM) / mp.mpf(props.refractive_index)
    D = 1 / (3 * (mp.mpf(props.mu_a) + mp.mpf(props.mu_s_prime)))
    return c, D, 1 / mp.mpf(props.mu_s_prime)


def mp_slab_kernel(x, y, t, props, d):
    """The four-term kernel exactly as printed, |r|^2 = x^2 + y^2 + d^2."""
    c, D, z0 = mp_consts(props)
    x, y, t, d = (mp.mpf(v) for v in (x, y, t, d))
    a = 4 * D * c * t
    bracket = sum(s * q * mp.exp(-q * q / a) for s, q in ((1, d - z0), (-1, d + z0), (1, 3 * d - z0), (-1, 3 * d + z0)))
    return (4 * mp.pi * D * c) ** mp.mpf(-1.5) * t ** mp.mpf(-2.5) * mp.exp(-mp.mpf(props.mu_a) * c * t) \
        * mp.exp(-(x * x + y * y + d * d) / a) * bracket


def mp_full_bracket(t, props, d):
    # late-time terms cancel to hundreds of digits, so sum explicitly at high precision
    with mp.workdps(400):
        c, D, z0 = mp_consts(props)
        a = 4 * D * c * mp.mpf(t)
        d = mp.mpf(d)
        total = mp.mpf(0)
        for k in range(4000):
            q1, q2 = (2 * k + 1) * d - z0, (2 * k + 1) * d + z0
            term = q1 * mp.exp(-q1 * q1 / a) - q2 * mp.exp(-q2 * q2 / a)
            total += term
            if q1 * q1 / a > 1200:
                break
        return +total


# --- optical properties -------------------------------------------------------

def test_derived_constants_follow_definitions():
    p = OpticalProperties(0.01, 2.0, 0.9, 1.4)
    assert p.D == 1.0 / (3.0 * (0.01 + 2.0))
    assert p.z0 == 1.0 / 2.0
    assert p.c == 0.299792458 / 1.4
    q = OpticalProperties.from_scattering(20.0, 0.9, 0.01)
    assert q.mu_s_prime == pytest.approx(2.0, rel=1e-15)
    assert q.z0 == pytest.approx(1.0 / (20.0 * (1 - 0.9)), rel=1e-15)


@pytest.mark.parametrize("kw", [dict(mu_a=-1e-3, mu_s_prime=1.0), dict(mu_a=0.0, mu_s_prime=0.0),
                                dict(mu_a=0.0, mu_s_prime=1.0, g=1.0), dict(mu_a=0.0, mu_s_prime=1.0, refractive_index=0.9),
                                dict(mu_a=np.nan, mu_s_prime=1.0)])
def test_invalid_properties_rejected(kw):
    with pytest.raises(ValueError):
        OpticalProperties(**kw)


def test_geometry_defaults_describe_a_26mm_phantom():
    geo = SceneGeometry()
    assert geo.thickness == 26.0 and geo.shape == (32, 32, 60)
    assert geo.x_centers()[geo.source_pixel[0]] == 0.0
    np.testing.assert_allclose(geo.t_centers()[:2], [25.0, 75.0])
    with pytest.raises(ValueError):
        SceneGeometry(d1=0.0)


# --- infinite medium ----------------------------------------------------------

def test_fluence_on_axis_without_absorption():
    p = OpticalProperties(0.0, 2.0)
    t = np.array([100.0, 200.0, 400.0])
    v = fluence_infinite(0.0, t, p)
    np.testing.assert_allclose(v, p.c * (4 * np.pi * p.D * p.c * t) ** -1.5, rtol=1e-14)
    np.testing.assert_allclose(v[1:] / v[:-1], 2.0 ** -1.5, rtol=1e-14)


@given(st.floats(0, 30), st.floats(1, 5000))
def test_fluence_radially_symmetric(r, t):
    assert fluence_infinite(r, t, BASE) == fluence_infinite(-r, t, BASE)


def test_fluence_matches_arbitrary_precision():
    c, D, _ = mp_consts(BASE)
    r, t = mp.mpf(5), mp.mpf(500)
    want = c * (4 * mp.pi * D * c * t) ** mp.mpf(-1.5) * mp.exp(-r * r / (4 * D * c * t) - mp.mpf(0.01) * c * t)
    assert fluence_infinite(5.0, 500.0, BASE) == pytest.approx(float(want), rel=1e-13)


def test_fluence_rejects_nonpositive_time():
    with pytest.raises(ValueError):
        fluence_infinite(1.0, 0.0, BASE)


# --- slab kernel --------------------------------------------------------------

def test_four_term_depth_kernel_matches_arbitrary_precision():
    got = slab_kernel_value(0.0, 0.0, 1000.0, BASE, 13.0, image_pairs=2, radius="depth")
    assert got == pytest.approx(float(mp_slab_kernel(0, 0, 1000, BASE, 13)), rel=1e-12)


@pytest.mark.parametrize("t", [50.0, 300.0, 1000.0, 2500.0])
@pytest.mark.parametrize("xy", [(0.0, 0.0), (3.0, -4.0)])
def test_four_term_kernel_off_axis_matches_arbitrary_precision(t, xy):
    got = slab_kernel_value(*xy, t, BASE, 13.0, image_pairs=2, radius="depth")
    want = float(mp_slab_kernel(*xy, t, BASE, 13))
    assert got == pytest.approx(want, rel=1e-11)


@pytest.mark.parametrize("t", [25.0, 500.0, 2000.0, 6000.0, 20000.0])
@pytest.mark.parametrize("d,musp", [(13.0, 2.0), (5.0, 0.5), (20.0, 5.0)])
def test_converged_bracket_matches_full_image_series(t, d, musp):
    p = OpticalProperties(0.01, musp)
    got = float(slab_bracket(np.array([t]), p, d)[0])
    want = float(mp_full_bracket(t, p, d))
    assert got == pytest.approx(want, rel=1e-10, abs=1e-300)


@given(st.floats(-30, 30), st.floats(-30, 30), st.floats(1, 3000))
def test_kernel_even_in_x_and_y(x, y, t):
    for kw in ({}, {"image_pairs": 2, "radius": "depth", "allow_negative": True}):
        k = slab_kernel_value(x, y, t, BASE, 13.0, **kw)
        assert k == slab_kernel_value(-x, y, t, BASE, 13.0, **kw)
        assert k == slab_kernel_value(x, -y, t, BASE, 13.0, **kw)


def test_kernel_vanishes_as_t_goes_to_zero():
    t = np.array([1e-3, 1e-1, 1.0, 5.0])
    for kw in ({}, {"image_pairs": 2, "radius": "depth"}):
        v = slab_kernel_value(0.0, 0.0, t, BASE, 13.0, **kw)
        assert v[0] == 0.0 and np.all(np.diff(v) >= 0)


def test_kernel_rejects_invalid_arguments():
    with pytest.raises(ValueError):
        slab_kernel_value(0.0, 0.0, 0.0, BASE, 13.0)
    with pytest.raises(ValueError):
        slab_kernel_value(0.0, 0.0, 10.0, BASE, -1.0)
    with pytest.raises(ValueError):
        slab_kernel_value(np.nan, 0.0, 10.0, BASE, 13.0)
    with pytest.raises(ValueError):
        slab_kernel_value(0.0, 0.0, 10.0, BASE, 13.0, radius="radial")


def test_four_term_bracket_sign_flip_is_flagged():
    # a thin, weakly scattering slab drives the truncated series negative within the window
    p = OpticalProperties(0.0, 0.5)
    with pytest.raises(ValueError, match="sign"):
        slab_kernel_value(0.0, 0.0, 3000.0, p, 5.0, image_pairs=2)
    assert slab_kernel_value(0.0, 0.0, 3000.0, p, 5.0, image_pairs=2, allow_negative=True) < 0
    with pytest.raises(ValueError, match="sign"):
        kernel_array(p, 5.0, SceneGeometry(nx=4, ny=4, nt=60, d1=5.0, d2=5.0), image_pairs=2)


def test_log_abs_kernel_matches_direct_evaluation():
    t = np.linspace(50, 3000, 40)
    for kw in ({}, {"image_pairs": 2, "radius": "depth"}):
        direct = slab_kernel_value(1.0, 2.0, t, BASE, 13.0, allow_negative=True, **kw)
        lg, sign = log_abs_slab_kernel(1.0, 2.0, t, BASE, 13.0, **kw)
        np.testing.assert_allclose(sign * np.exp(lg), direct, rtol=1e-10)


# --- sampled kernels ----------------------------------------------------------

def test_sample_kernel_bin_centers_and_origin():
    geo = SceneGeometry(nx=5, ny=7, nt=10)
    k = sample_kernel(BASE, 13.0, geo)
    x, y = geo.x_centers(), geo.y_centers()
    for i, j, n in [(2, 3, 4), (0, 6, 9), (4, 1, 0)]:
        want = slab_kernel_value(x[i], y[j], (n + 0.5) * geo.bin_width, BASE, 13.0)
        assert k.data[i, j, n] == pytest.approx(want, rel=1e-13)
    assert x[2] == 0.0 and y[3] == 0.0


def test_sample_kernel_zero_at_nonpositive_times():
    geo = SceneGeometry(nx=3, ny=3, nt=6)
    k = kernel_array(BASE, 13.0, geo, time_offset=-1.0)
    assert np.all(k[:, :, :2] == 0.0)
    assert np.all(k[:, :, 2:] >= 0.0)


@pytest.mark.parametrize("musp", [0.5, 1.0, 2.0, 3.5, 5.0])
@pytest.mark.parametrize("mua", [0.0, 0.01, 0.05, 0.1])
@pytest.mark.parametrize("d", [5.0, 10.0, 13.0, 20.0])
def test_sampled_kernel_nonnegative_over_parameter_sweep(musp, mua, d):
    geo = SceneGeometry(nx=8, ny=8, nt=60, d1=d, d2=d)
    k = sample_kernel(OpticalProperties(mua, musp), d, geo).data
    assert np.all(k >= 0.0) and np.all(np.isfinite(k))


def _absorption_pair():
    geo = SceneGeometry(nx=5, ny=5, nt=60)
    k1 = sample_kernel(OpticalProperties(0.01, 2.0), 13.0, geo).data
    k2 = sample_kernel(OpticalProperties(0.02, 2.0), 13.0, geo).data
    return k1, k2, geo.t_centers()


def test_absorption_factorizes_up_to_diffusion_coefficient_shift():
    # mu_a also enters D = 1 / (3 (mu_a + mu_s')); past the peak that shift only
    # perturbs the log-ratio slope by pi^2 c dD / d^2, about 0.5% of dmu_a c
    k1, k2, t = _absorption_pair()
    tail = slice(int(np.argmax(k1[2, 2])) + 5, None)
    for i, j in [(2, 2), (0, 3), (4, 4)]:
        slope = np.polyfit(t[tail], np.log(k2[i, j, tail] / k1[i, j, tail]), 1)[0]
        assert slope == pytest.approx(-0.01 * BASE.c, rel=0.01)


@pytest.mark.xfail(strict=True, reason="mu_a also shifts D, so the bin ratio is not exactly exp(-dmu c t)")
def test_absorption_factorizes_exactly():
    k1, k2, t = _absorption_pair()
    live = k1 > 1e-300
    ratio = (k2 / np.where(live, k1, 1.0))[live]
    expected = np.broadcast_to(np.exp(-0.01 * BASE.c * t), k1.shape)[live]
    np.testing.assert_allclose(ratio, expected, rtol=1e-12)


def test_peak_time_increases_with_thickness():
    geo = SceneGeometry(nx=1, ny=1, nt=200, bin_width=10.0)
    peaks = [np.argmax(sample_kernel(BASE, d, geo).data[0, 0]) for d in (5.0, 10.0, 13.0)]
    assert peaks[0] < peaks[1] < peaks[2]


def test_dual_zero_seed_reproduces_real_values():
    geo = SceneGeometry(nx=6, ny=6, nt=30)
    real = kernel_array(BASE, 13.0, geo)
    dual = kernel_array(BASE.with_mu_s_prime(Dual(2.0, 0.0)), 13.0, geo)
    np.testing.assert_array_equal(dual.value, real)
    assert np.all(dual.deriv == 0.0)
    t = np.array([100.0, 900.0])
    v = slab_kernel_value(1.0, 1.0, t, BASE, 13.0)
    dv = slab_kernel_value(1.0, 1.0, t, BASE.with_mu_s_prime(Dual(2.0, 0.0)), 13.0)
    np.testing.assert_array_equal(dv.value, v)


def test_kernel_continuous_in_reduced_scattering():
    # no sign flips, and halving the grid spacing halves the largest step
    t = np.array([500.0, 1500.0, 3000.0])

    def max_step(n):
        mus = np.linspace(0.5, 5.0, n)
        vals = np.array([slab_kernel_value(0.0, 0.0, t, OpticalProperties(0.01, m), 13.0) for m in mus])
        assert np.all(vals > 0)
        return np.abs(np.diff(np.log(vals), axis=0)).max()

    coarse, fine = max_step(181), max_step(361)
    assert fine / coarse == pytest.approx(0.5, abs=0.05)


# --- late-time slope ----------------------------------------------------------

def test_log_slope_of_exponential_is_exact():
    t = np.linspace(0, 3000, 61)
    assert log_slope_late(np.exp(-0.0021 * t), t) == pytest.approx(-0.0021, abs=1e-12)
    assert log_slope_late(3.5 * np.exp(-0.0021 * t), t, slice(40, None)) == pytest.approx(-0.0021, abs=1e-12)


def test_log_slope_rejects_nonpositive_window():
    t = np.arange(5.0)
    with pytest.raises(ValueError, match="nonpositive"):
        log_slope_late(np.array([1.0, 0.5, 0.0, 0.1, 0.2]), t)


def test_late_window_rejects_dead_histogram():
    with pytest.raises(ValueError, match="insufficient SNR"):
        late_window(np.zeros(60))
    noisy = np.full(60, 10.0)
    noisy[20] = 30.0
    with pytest.raises(ValueError, match="insufficient SNR"):
        late_window(noisy)


def test_late_window_takes_last_quarter_after_peak():
    t = (np.arange(70) + 0.5) * 50.0
    h = sample_kernel(BASE, 13.0, SceneGeometry(nx=1, ny=1, nt=70)).data[0, 0]
    w = late_window(h)
    peak = np.argmax(h)
    assert w[-1] == 69 and w[0] > peak
    assert len(w) == round(0.25 * (69 - peak))
    assert np.all(np.diff(t[w]) > 0)


def _kernel_hist(mua, nt, **kw):
    geo = SceneGeometry(nx=1, ny=1, nt=nt)
    return sample_kernel(OpticalProperties(mua, 2.0), 13.0, geo, **kw).data[0, 0], geo.t_centers()


@pytest.mark.xfail(strict=True, reason="slab escape rate biases the 70-bin slope about 2x; see decisions ledger")
@pytest.mark.parametrize("kw", [{}, {"image_pairs": 2, "radius": "depth"}])
def test_seventy_bin_slope_recovers_absorption(kw):
    h, t = _kernel_hist(0.01, 70, **kw)
    slope = log_slope_late(h, t, late_window(h))
    assert slope == pytest.approx(-0.01 * BASE.c, rel=0.05)


@pytest.mark.xfail(strict=True, reason="non-absorptive decay is about 10x the stated bound; see decisions ledger")
def test_zero_absorption_slope_bound():
    h, t = _kernel_hist(0.0, 70)
    assert log_slope_late(h, t, late_window(h)) > -0.001 * BASE.c


def test_complete_series_slope_tends_to_absorption_plus_escape_rate():
    # the physically complete kernel decays at mu_a c + pi^2 D c / d^2 + 5 / (2 t) - 3 / (2 t)
    p = BASE
    t = np.linspace(40000.0, 60000.0, 200)
    lg, sign = log_abs_slab_kernel(0.0, 0.0, t, p, 13.0)
    assert np.all(sign > 0)
    slope = np.polyfit(t, lg, 1)[0]
    escape = np.pi ** 2 * p.D * p.c / 13.0 ** 2
    assert slope == pytest.approx(-(p.mu_a * p.c + escape) - 1.0 / 50000.0, rel=0.01)


@pytest.mark.parametrize("mua", [0.005, 0.01, 0.02])
def test_four_term_slope_converges_to_absorption_rate(mua):
    # |K| of the truncated four-term kernel: the bracket tends to a constant,
    # so the log-slope approaches -mu_a c as the window moves later
    p = OpticalProperties(mua, 2.0)
    errors = []
    for n in (560, 1120, 2240, 4480, 8960):
        t = (np.arange(n) + 0.5) * 50.0
        lg, _ = log_abs_slab_kernel(0.0, 0.0, t, p, 13.0, image_pairs=2, radius="depth")
        w = slice(n - n // 4, n)
        slope = np.polyfit(t[w], lg[w], 1)[0]
        errors.append(abs(slope / (-mua * p.c) - 1.0))
    assert all(b < a for a, b in zip(errors, errors[1:]))
    assert errors[1] < 0.05
