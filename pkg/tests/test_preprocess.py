import numpy as np
import pytest

from daugs.core import DataError, ImageSeries
from daugs.preprocess import (
    crop_to_roi,
    normalize01,
    preprocess_pipeline,
    resample_time,
    temporal_variance_map,
    upsample2x,
)


def series_from(data, dt=1.0, spacing=(1.0, 1.0)):
    data = np.asarray(data, dtype=np.float32)
    times = np.arange(data.shape[0]) * dt
    return ImageSeries(data, spacing, times)


def catmull_rom(s):
    # reference kernel, a = -0.5
    s = abs(s)
    if s <= 1:
        return 1.5 * s**3 - 2.5 * s**2 + 1.0
    if s < 2:
        return -0.5 * s**3 + 2.5 * s**2 - 4.0 * s + 2.0
    return 0.0


def test_upsample_constant_preserved():
    s = series_from(np.full((2, 2, 2), 3.25))
    up = upsample2x(s)
    assert up.width == 4 and up.height == 4
    assert np.allclose(up.data, 3.25)
    assert up.spacing_mm == (0.5, 0.5)


def test_upsample_ramp_reproduced():
    # derived oracle: a bilinear ramp evaluated at the output coordinates j/2
    h = w = 12
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ramp = 0.25 * xx + 0.5 * yy + 1.0
    s = series_from(ramp[None])
    up = upsample2x(s)
    jy, jx = np.mgrid[0 : 2 * h, 0 : 2 * w].astype(np.float64)
    expected = 0.25 * (jx / 2.0) + 0.5 * (jy / 2.0) + 1.0
    interior = (slice(2, -3), slice(2, -3))  # clamped edges flatten the ramp
    assert np.abs(up.data[0][interior] - expected[interior]).max() < 1e-4


def test_upsample_single_pixel_matches_kernel_oracle():
    n = 16
    img = np.zeros((1, n, n), dtype=np.float64)
    img[0, 8, 8] = 1.0
    up = upsample2x(series_from(img))
    # derived oracle: separable convolution with the Catmull-Rom kernel at j/2 - 8
    for jy in range(12, 22):
        for jx in range(12, 22):
            want = catmull_rom(jy / 2.0 - 8.0) * catmull_rom(jx / 2.0 - 8.0)
            assert up.data[0, jy, jx] == pytest.approx(want, abs=1e-6)


def test_upsample_preserves_mean_for_smooth_images():
    yy, xx = np.mgrid[0:32, 0:32] / 32.0
    img = np.sin(2 * np.pi * xx) * np.cos(2 * np.pi * yy) * 0.3 + 0.5
    up = upsample2x(series_from(img[None]))
    assert abs(float(up.data.mean()) - float(img.mean())) < 1e-3


def test_crop_explicit_center_central_window():
    rng = np.random.default_rng(0)
    data = rng.random((3, 256, 256), dtype=np.float64)
    s = series_from(data)
    out = crop_to_roi(s, center=(128, 128))
    assert out.width == out.height == 128
    assert np.array_equal(out.data, s.data[:, 64:192, 64:192])


def test_crop_auto_center_finds_pulsating_block():
    # bright pulsating 10x10 block centered at (60, 60) pre-upsample,
    # center-peaked so the variance argmax is unambiguous
    rng = np.random.default_rng(3)
    data = rng.normal(0.2, 0.002, size=(30, 256, 256))
    t = np.arange(30)
    pulse = 0.5 + 0.5 * np.sin(t / 3.0)
    yy, xx = np.mgrid[55:65, 55:65].astype(np.float64)
    taper = np.exp(-((xx - 59.5) ** 2 + (yy - 59.5) ** 2) / (2 * 3.0**2))
    data[:, 55:65, 55:65] += pulse[:, None, None] * taper[None]
    s = series_from(data)
    up = upsample2x(s)
    out = crop_to_roi(up)
    # derived oracle: brute-force smoothed-variance argmax on the upsampled series
    vmap = temporal_variance_map(up)
    cy, cx = np.unravel_index(int(np.argmax(vmap)), vmap.shape)
    assert abs(cx - 120) <= 2 and abs(cy - 120) <= 2
    x0 = int(np.clip(cx - 64, 0, up.width - 128))
    y0 = int(np.clip(cy - 64, 0, up.height - 128))
    assert np.array_equal(out.data, up.data[:, y0 : y0 + 128, x0 : x0 + 128])


def test_crop_constant_series_is_error():
    s = series_from(np.full((5, 256, 256), 0.7))
    with pytest.raises(DataError, match="no ROI signal"):
        crop_to_roi(s)


def test_crop_too_small_is_error():
    s = series_from(np.zeros((2, 64, 64)))
    with pytest.raises(DataError):
        crop_to_roi(s)


def test_resample_identity_on_uniform_30():
    rng = np.random.default_rng(5)
    s = series_from(rng.random((30, 4, 4)))
    out = resample_time(s, n_out=30)
    assert np.allclose(out.data, s.data, atol=1e-6)
    assert np.allclose(out.frame_times_s, s.frame_times_s)


def test_resample_linear_curves_exact():
    t = np.arange(10, dtype=np.float64) * 2.0
    data = (3.0 * t + 1.0)[:, None, None] * np.ones((1, 3, 3))
    s = ImageSeries(data.astype(np.float32), (1.0, 1.0), t)
    out = resample_time(s, n_out=17)
    expect = 3.0 * out.frame_times_s + 1.0
    assert np.abs(out.data[:, 1, 1] - expect).max() < 1e-4


def test_resample_gamma_variate_against_analytic():
    # derived oracle: analytic gamma-variate evaluated at the output times
    def gv(t, a=1.0, t0=5.0, alpha=3.0, beta=4.0):
        d = np.maximum(t - t0, 0.0)
        return a * (d / (alpha * beta)) ** alpha * np.exp(alpha - d / beta)

    t_in = np.linspace(0.0, 59.0, 60)
    data = gv(t_in)[:, None, None] * np.ones((1, 2, 2))
    s = ImageSeries(data.astype(np.float32), (1.0, 1.0), t_in)
    out = resample_time(s, n_out=30)
    expect = gv(out.frame_times_s)
    assert np.abs(out.data[:, 0, 0] - expect).max() < 1e-3


def test_resample_too_few_frames():
    s = series_from(np.zeros((3, 4, 4)))
    with pytest.raises(DataError):
        resample_time(s)


def test_normalize_formula():
    data = np.linspace(100.0, 300.0, 8).reshape(2, 2, 2)
    out = normalize01(series_from(data))
    assert np.allclose(out.data, (data - 100.0) / 200.0, atol=1e-6)


def test_normalize_identity_when_already_01():
    data = np.zeros((2, 2, 2))
    data[0, 0, 0] = 0.0
    data[1, 1, 1] = 1.0
    data[0, 1, 1] = 0.5
    out = normalize01(series_from(data))
    assert np.allclose(out.data, data, atol=1e-7)


def test_normalize_constant_to_zero():
    out = normalize01(series_from(np.full((3, 2, 2), 42.0)))
    assert np.all(out.data == 0.0)


def test_pipeline_canonical_output():
    rng = np.random.default_rng(11)
    data = rng.normal(10.0, 0.05, size=(45, 120, 130))
    t = np.arange(45)
    data[:, 50:60, 55:65] += (2.0 + np.sin(t / 4.0))[:, None, None]
    s = series_from(data)
    out = preprocess_pipeline(s)
    assert (out.n_frames, out.height, out.width) == (30, 128, 128)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0
