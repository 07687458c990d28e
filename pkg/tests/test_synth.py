import numpy as np
import pytest

from daugs.core import BLOODPOOL, MYOCARDIUM, DataError, read_fpt, substream
from daugs.metrics import aha6_split, detect_failure
from daugs.synth import (
    GammaCurve,
    PhantomSpec,
    ShiftTransform,
    apply_shift,
    gen_cohort,
    gen_phantom,
    moco_corrupt,
    random_shift,
    read_manifest,
    sample_phantom_spec,
)


def test_phantom_ground_truth_is_failure_free():
    series, gt, rv = gen_phantom(PhantomSpec())
    seg = aha6_split(gt, rv_centroid=rv)
    rep = detect_failure(gt, seg)
    assert not rep.failed
    for cls in (0, MYOCARDIUM, BLOODPOOL):
        assert (gt.labels == cls).any()


def test_phantom_enhancement_ordering():
    spec = PhantomSpec(noise_sigma=0.0)
    series, gt, rv = gen_phantom(spec)
    # derived check: argmax time of class-mean curves follows RV < LV < myo
    labels = gt.labels
    rv_region = (labels == BLOODPOOL) & (
        np.hypot(
            np.arange(spec.size)[None, :] - spec.rv_center[0],
            np.arange(spec.size)[:, None] - spec.rv_center[1],
        )
        < spec.rv_radius
    )
    lv_region = (labels == BLOODPOOL) & ~rv_region
    myo_region = labels == MYOCARDIUM
    data = series.data.astype(np.float64)
    t_rv = np.argmax(data[:, rv_region].mean(axis=1))
    t_lv = np.argmax(data[:, lv_region].mean(axis=1))
    t_myo = np.argmax(data[:, myo_region].mean(axis=1))
    assert t_rv < t_lv < t_myo


def test_phantom_deterministic():
    a, _, _ = gen_phantom(PhantomSpec(seed=9))
    b, _, _ = gen_phantom(PhantomSpec(seed=9))
    assert np.array_equal(a.data, b.data)


def test_phantom_bounds_check():
    with pytest.raises(DataError):
        gen_phantom(PhantomSpec(lv_center=(5.0, 64.0)))


def test_phantom_defect_lowers_sector_intensity():
    base = PhantomSpec(noise_sigma=0.0)
    spec = PhantomSpec(noise_sigma=0.0, defect_sectors=(2,))
    s0, gt, rv = gen_phantom(base)
    s1, _, _ = gen_phantom(spec)
    seg = aha6_split(gt, rv_centroid=rv)
    in_defect = seg == 2
    out_defect = (seg >= 1) & (seg != 2)
    assert s1.data[:, in_defect].max() < s0.data[:, in_defect].max()
    assert np.allclose(s1.data[:, out_defect], s0.data[:, out_defect])


def test_gamma_curve_peak():
    c = GammaCurve(0.8, onset_s=5.0, alpha=3.0, beta_s=2.0)
    t = np.linspace(0, 40, 4001)
    v = c(t)
    assert v.max() == pytest.approx(0.8, abs=1e-4)
    assert t[np.argmax(v)] == pytest.approx(5.0 + 3.0 * 2.0, abs=0.02)
    assert np.all(v[t <= 5.0] == 0.0)


def test_identity_shift_is_identity():
    series, gt, _ = gen_phantom(PhantomSpec(noise_sigma=0.0))
    out, gt2, mag = apply_shift(series, gt, ShiftTransform(), substream(0, 99))
    assert mag == 0.0
    assert np.array_equal(out.data, series.data)
    assert np.array_equal(gt2.labels, gt.labels)


def test_pure_translation_moves_centroid_exactly():
    series, gt, _ = gen_phantom(PhantomSpec(noise_sigma=0.0))
    t = ShiftTransform(translation_px=(2.0, 0.0))
    out, gt2, _ = apply_shift(series, gt, t, substream(0, 98))
    ys0, xs0 = np.nonzero(gt.labels == MYOCARDIUM)
    ys1, xs1 = np.nonzero(gt2.labels == MYOCARDIUM)
    assert xs1.mean() - xs0.mean() == pytest.approx(2.0, abs=1e-9)
    assert ys1.mean() - ys0.mean() == pytest.approx(0.0, abs=1e-9)


def test_photometric_identity_passthrough():
    series, gt, _ = gen_phantom(PhantomSpec(noise_sigma=0.0))
    t = ShiftTransform(gamma=1.0, flatfield_sigma=0.0, noise_sigma=0.0, coil_amplitude=0.0)
    out, _, _ = apply_shift(series, gt, t, substream(0, 97))
    assert np.array_equal(out.data, series.data)


def test_shift_ranges_validated():
    with pytest.raises(DataError):
        ShiftTransform(rotation_deg=75.0)
    with pytest.raises(DataError):
        ShiftTransform(scale=1.5)


def test_random_shift_within_ranges():
    for k in range(25):
        t = random_shift(substream(5, k))
        assert abs(t.rotation_deg) <= 60.0
        assert abs(t.shear_deg) <= 10.0
        assert abs(t.scale - 1.0) <= 0.2
        assert 0.5 <= t.gamma <= 1.5
        assert 0.0 <= t.magnitude() <= 1.0


def test_affine_shift_keeps_mask_and_image_aligned():
    # oracle view: a segmenter reading the shifted truth still matches it
    series, gt, _ = gen_phantom(PhantomSpec(noise_sigma=0.0))
    t = ShiftTransform(rotation_deg=30.0, scale=1.1, translation_px=(1.0, -1.0))
    out, gt2, _ = apply_shift(series, gt, t, substream(0, 96))
    frame = out.data[-10]
    myo_mean = frame[gt2.labels == MYOCARDIUM].mean()
    bg_mean = frame[gt2.labels == 0].mean()
    assert myo_mean > bg_mean + 0.05  # warped contours still track the warped image


def diastolic_pair():
    sys_spec = PhantomSpec(cavity_radius=13.0, wall_thickness=9.0, noise_sigma=0.0)
    dia_spec = PhantomSpec(cavity_radius=18.0, wall_thickness=5.0, noise_sigma=0.0)
    s, _, _ = gen_phantom(sys_spec)
    d, _, _ = gen_phantom(dia_spec)
    return s, d


def test_moco_f0_is_bit_exact():
    s, d = diastolic_pair()
    out = moco_corrupt(s, d, 0, substream(1, 0))
    assert np.array_equal(out.data, s.data)


def test_moco_f2_changes_exactly_two_frames():
    s, d = diastolic_pair()
    out = moco_corrupt(s, d, 2, substream(1, 1))
    differing = [
        i for i in range(s.n_frames) if not np.array_equal(out.data[i], s.data[i])
    ]
    assert len(differing) == 2
    for i in differing:
        assert np.array_equal(out.data[i], d.data[i])
        assert 8 <= i <= 22
    assert np.array_equal(out.frame_times_s, s.frame_times_s)


def test_moco_reproducible_choice():
    s, d = diastolic_pair()
    a = moco_corrupt(s, d, 4, substream(2, 7))
    b = moco_corrupt(s, d, 4, substream(2, 7))
    assert np.array_equal(a.data, b.data)


def test_moco_validation():
    s, d = diastolic_pair()
    with pytest.raises(DataError):
        moco_corrupt(s, d, 5, substream(0, 0))


def test_cohort_unshifted(tmp_path):
    manifest = gen_cohort(5, tmp_path, regime="none", seed=3)
    rows = read_manifest(manifest)
    assert len(rows) == 5
    assert all(r.shift_magnitude == 0.0 for r in rows)
    for r in rows:
        series = read_fpt(tmp_path / r.series_path)
        gt = read_fpt(tmp_path / r.gt_path)
        assert series.shape == (30, 128, 128)
        assert gt.shape == (128, 128)


def test_cohort_shifted_within_ranges(tmp_path):
    manifest = gen_cohort(6, tmp_path, regime="shifted", seed=4)
    rows = read_manifest(manifest)
    assert all(r.shift_magnitude > 0.0 for r in rows)
    for r in rows:
        assert abs(r.shift.rotation_deg) <= 60.0
        assert abs(r.shift.shear_deg) <= 10.0


def test_cohort_deterministic(tmp_path):
    m1 = gen_cohort(4, tmp_path / "a", regime="shifted", seed=11)
    m2 = gen_cohort(4, tmp_path / "b", regime="shifted", seed=11)
    assert m1.read_text() == m2.read_text()
    for r1, r2 in zip(read_manifest(m1), read_manifest(m2)):
        a = read_fpt(m1.parent / r1.series_path)
        b = read_fpt(m2.parent / r2.series_path)
        assert np.array_equal(a, b)


def test_cohort_ground_truths_never_fail(tmp_path):
    manifest = gen_cohort(8, tmp_path, regime="shifted", seed=21)
    for r in read_manifest(manifest):
        gt = read_fpt(tmp_path / r.gt_path)
        from daugs.core import LabelMask

        mask = LabelMask(gt)
        seg = aha6_split(mask, rv_centroid=r.rv_centroid)
        assert not detect_failure(mask, seg).failed
