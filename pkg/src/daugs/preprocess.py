"""Raw dynamic series -> canonical 128x128x30, [0,1]-normalized analysis matrix.

Pipeline order is upsample -> crop -> temporal resample -> normalize; explicit
crop centers are given in post-upsampling pixel coordinates.
"""

from __future__ import annotations

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.ndimage import uniform_filter

from .core import DataError, ImageSeries

TARGET_SIZE = 128
TARGET_FRAMES = 30

# Catmull-Rom (a = -0.5) taps at half-sample offsets -1.5, -0.5, +0.5, +1.5.
_HALF_TAPS = np.array([-1.0 / 16.0, 9.0 / 16.0, 9.0 / 16.0, -1.0 / 16.0], dtype=np.float64)


def _upsample_axis2x(arr: np.ndarray, axis: int) -> np.ndarray:
    """Double one axis: even samples copy the input, odd samples are the
    Catmull-Rom half-sample filter with clamped (edge-replicated) boundary."""
    a = np.moveaxis(arr, axis, 0).astype(np.float64)
    n = a.shape[0]
    idx = np.arange(n)
    im1 = np.clip(idx - 1, 0, n - 1)
    ip1 = np.clip(idx + 1, 0, n - 1)
    ip2 = np.clip(idx + 2, 0, n - 1)
    odd = (
        _HALF_TAPS[0] * a[im1]
        + _HALF_TAPS[1] * a[idx]
        + _HALF_TAPS[2] * a[ip1]
        + _HALF_TAPS[3] * a[ip2]
    )
    out = np.empty((2 * n,) + a.shape[1:], dtype=np.float64)
    out[0::2] = a
    out[1::2] = odd
    return np.moveaxis(out, 0, axis)


def upsample2x(series: ImageSeries) -> ImageSeries:
    """2-fold spatial upsampling with an interpolating bicubic (Catmull-Rom) kernel.

    Output sample j lies at input coordinate j/2, so even samples reproduce the
    input exactly; pixel spacing is halved.
    """
    up = _upsample_axis2x(series.data, axis=1)
    up = _upsample_axis2x(up, axis=2)
    dx, dy = series.spacing_mm
    return ImageSeries(up.astype(np.float32), (dx / 2.0, dy / 2.0), series.frame_times_s)


def temporal_variance_map(series: ImageSeries, box: int = 5) -> np.ndarray:
    """Per-pixel temporal intensity variance smoothed with a zero-padded box mean."""
    v = np.var(series.data.astype(np.float64), axis=0)
    return uniform_filter(v, size=box, mode="constant", cval=0.0)


def crop_to_roi(
    series: ImageSeries,
    center: tuple[int, int] | None = None,
    size: int = TARGET_SIZE,
) -> ImageSeries:
    """Crop a size x size window around `center` (x, y), clamped to the image.

    Without a center, auto-locate the ROI at the argmax of the box-smoothed
    temporal variance map (bright pulsating structures win).
    """
    h, w = series.height, series.width
    if h < size or w < size:
        raise DataError(f"image {w}x{h} smaller than the {size}x{size} crop")
    if center is None:
        vmap = temporal_variance_map(series)
        if vmap.max() <= 0.0:
            raise DataError("no ROI signal: temporal variance map is flat")
        cy, cx = np.unravel_index(int(np.argmax(vmap)), vmap.shape)
    else:
        cx, cy = int(center[0]), int(center[1])
        if not (0 <= cx < w and 0 <= cy < h):
            raise DataError(f"crop center {(cx, cy)} outside image bounds")
    x0 = int(np.clip(cx - size // 2, 0, w - size))
    y0 = int(np.clip(cy - size // 2, 0, h - size))
    data = series.data[:, y0 : y0 + size, x0 : x0 + size]
    return ImageSeries(data, series.spacing_mm, series.frame_times_s)


def resample_time(series: ImageSeries, n_out: int = TARGET_FRAMES) -> ImageSeries:
    """Resample per-pixel time curves onto n_out uniform times spanning
    [first, last] with a shape-preserving (monotone) piecewise-cubic Hermite."""
    if series.n_frames < 4:
        raise DataError("temporal resampling needs at least 4 frames")
    if n_out < 2:
        raise DataError("n_out must be >= 2")
    t = series.frame_times_s
    t_new = np.linspace(t[0], t[-1], n_out)
    interp = PchipInterpolator(t, series.data.astype(np.float64), axis=0)
    data = interp(t_new)
    return ImageSeries(data.astype(np.float32), series.spacing_mm, t_new)


def normalize01(series: ImageSeries) -> ImageSeries:
    """Affine map of the global min/max of the whole series onto [0, 1];
    a constant series maps to all zeros."""
    data = series.data.astype(np.float64)
    lo = float(data.min())
    hi = float(data.max())
    if hi == lo:
        out = np.zeros_like(data)
    else:
        out = (data - lo) / (hi - lo)
    return series.with_data(out.astype(np.float32))


def preprocess_pipeline(
    series: ImageSeries,
    center: tuple[int, int] | None = None,
    n_out: int = TARGET_FRAMES,
) -> ImageSeries:
    """Full chain: upsample2x -> crop_to_roi -> resample_time -> normalize01."""
    up = upsample2x(series)
    cropped = crop_to_roi(up, center=center)
    resampled = resample_time(cropped, n_out=n_out)
    return normalize01(resampled)
