import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from allphotons.diffusion import OpticalProperties, SceneGeometry
from allphotons.forward import ForwardScene, default_scene, predict, predict_dual, predict_with_diagnostics
from allphotons.tensor import Image2D, Volume3D, conv3d, multiply_mask
from allphotons.targets import wedge


def geo_small(**kw):
    base = dict(nx=8, ny=8, nt=16, bin_width=100.0, d1=8.0, d2=8.0, pixel_size=3.0)
    base.update(kw)
    return SceneGeometry(**base)


def scene(mask=None, musp=2.0, mua=0.01, geo=None, **kw):
    return default_scene(geo or geo_small(), OpticalProperties(mua, musp), mask=mask, **kw)


def reference(sc):
    k1, k2 = sc.kernels()
    px, bw = sc.geometry.pixel_size, sc.geometry.bin_width
    x = conv3d(sc.illumination, Volume3D(k1, px, bw))
    return conv3d(multiply_mask(x, sc.mask), Volume3D(k2, px, bw)).data


def test_open_mask_equals_two_convolutions():
    sc = scene()
    want = reference(sc)
    got = predict(sc).data
    assert np.max(np.abs(got - np.maximum(want, 0))) <= 1e-10 * want.max()


def test_masked_prediction_matches_reference_composition():
    sc = scene(mask=wedge(8, 8, 3.0, 18.0, 12.0))
    want = np.maximum(reference(sc), 0)
    assert np.max(np.abs(predict(sc).data - want)) <= 1e-10 * want.max()


def test_zero_mask_gives_zero():
    assert np.all(predict(scene(mask=np.zeros((8, 8)))).data == 0)


def test_single_pixel_scales_with_transmission():
    base = np.zeros((8, 8))
    base[3, 5] = 1.0
    one = predict(scene(mask=base)).data
    half = predict(scene(mask=0.5 * base)).data
    np.testing.assert_allclose(half, 0.5 * one, rtol=1e-12, atol=1e-14 * one.max())


@settings(max_examples=25)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 0.95))
def test_linear_in_mask(seed, a):
    rng = np.random.default_rng(seed)
    t1, t2 = rng.random((8, 8)), rng.random((8, 8))
    p1, p2 = predict(scene(mask=t1)).data, predict(scene(mask=t2)).data
    mix = predict(scene(mask=a * t1 + (1 - a) * t2)).data
    np.testing.assert_allclose(mix, a * p1 + (1 - a) * p2, rtol=1e-9, atol=1e-10 * max(p1.max(), p2.max()))


def test_linear_in_illumination():
    sc = scene()
    doubled = ForwardScene(sc.illumination.with_data(2 * sc.illumination.data), sc.geometry, sc.props, sc.mask)
    np.testing.assert_allclose(predict(doubled).data, 2 * predict(sc).data, rtol=1e-12, atol=1e-300)


def test_output_nonnegative_and_causal():
    geo = geo_small(nt=24, bin_width=50.0, source_bin=6)
    out = predict(scene(geo=geo)).data
    assert np.all(out >= 0)
    assert np.all(out[:, :, :7] == 0)
    assert out[:, :, 7:].max() > 0


def test_more_absorption_less_signal():
    totals = [predict(scene(mua=m)).data.sum() for m in (0.0, 0.01, 0.02, 0.05)]
    assert all(a > b for a, b in zip(totals, totals[1:]))


def test_predict_dual_value_equals_predict():
    sc = scene(mask=wedge(8, 8, 3.0, 18.0, 12.0))
    value, _ = predict_dual(sc)
    np.testing.assert_array_equal(value.data, predict(sc).data)


def test_predict_dual_zero_seed():
    _, d = predict_dual(scene(), seed=0.0)
    assert np.all(d.data == 0)


def test_predict_dual_matches_finite_differences():
    mask = wedge(8, 8, 3.0, 18.0, 12.0)
    _, d = predict_dual(scene(mask=mask, musp=2.0))
    h = 1e-5
    fd = (predict(scene(mask=mask, musp=2.0 + h)).data - predict(scene(mask=mask, musp=2.0 - h)).data) / (2 * h)
    big = np.abs(fd) > 1e-6 * np.abs(fd).max()
    np.testing.assert_allclose(d.data[big], fd[big], rtol=1e-4)


def test_predict_dual_seed_scales_derivative():
    sc = scene()
    _, d1 = predict_dual(sc, 1.0)
    _, d3 = predict_dual(sc, 3.0)
    np.testing.assert_allclose(d3.data, 3 * d1.data, rtol=1e-12, atol=1e-12 * np.abs(d1.data).max())


def test_diagnostics_report_no_significant_negatives():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        _, diag = predict_with_diagnostics(scene(geo=SceneGeometry()))
    assert diag.relative <= 1e-9


def test_scene_validation():
    sc = scene()
    with pytest.raises(ValueError, match="mask shape"):
        ForwardScene(sc.illumination, sc.geometry, sc.props, Image2D(np.ones((7, 8)), 3.0))
    with pytest.raises(ValueError, match="pixel_size"):
        ForwardScene(sc.illumination, sc.geometry, sc.props, Image2D(np.ones((8, 8)), 2.0))
    with pytest.raises(ValueError, match="\\[0, 1\\]"):
        sc.with_mask(np.full((8, 8), 1.5))
    with pytest.raises(ValueError, match="illumination shape"):
        ForwardScene(Volume3D(np.ones((8, 8, 4)), 3.0, 100.0), sc.geometry, sc.props, sc.mask)


def test_later_sampling_phase_moves_mass_earlier():
    geo = geo_small()
    early = predict(scene(geo=geo)).data.sum(axis=(0, 1))
    late = predict(scene(geo=geo, k2_time_offset=0.5)).data.sum(axis=(0, 1))
    # K2 sampled half a bin later reads the kernel ahead of time
    t = np.arange(geo.nt)
    shift = (late @ t) / late.sum() - (early @ t) / early.sum()
    assert -0.8 < shift < -0.2
