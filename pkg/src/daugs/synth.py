"""Synthetic first-pass perfusion phantoms, dataset-shift simulators, and the
frame-swap motion-correction corruption harness. All ground truth originates here."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import (
    BLOODPOOL,
    DOM_COHORT,
    DOM_PHANTOM,
    DOM_SHIFT,
    MYOCARDIUM,
    DataError,
    ImageSeries,
    LabelMask,
    substream,
    write_fpt,
)

# MoCo frame swaps draw from the mid-contrast window (inclusive).
MOCO_WINDOW = (8, 22)


@dataclass(frozen=True)
class GammaCurve:
    """Peak-normalized gamma-variate bolus curve: value `amplitude` at the peak."""

    amplitude: float
    onset_s: float
    alpha: float = 3.0
    beta_s: float = 1.5

    def __call__(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        d = np.maximum(t - self.onset_s, 0.0)
        peak = self.alpha * self.beta_s
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self.amplitude * (d / peak) ** self.alpha * np.exp(self.alpha - d / self.beta_s)
        return np.where(d > 0, out, 0.0)


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 128
    n_frames: int = 30
    dt_s: float = 1.0
    spacing_mm: tuple[float, float] = (1.0, 1.0)
    lv_center: tuple[float, float] = (64.0, 64.0)  # (x, y)
    cavity_radius: float = 16.0
    wall_thickness: float = 7.0
    rv_center: tuple[float, float] = (34.0, 64.0)
    rv_radius: float = 11.0
    bg_curve: GammaCurve = GammaCurve(0.04, 9.0, alpha=2.0, beta_s=4.0)
    myo_curve: GammaCurve = GammaCurve(0.40, 11.0, alpha=3.0, beta_s=3.0)
    lv_curve: GammaCurve = GammaCurve(0.85, 7.0)
    rv_curve: GammaCurve = GammaCurve(0.75, 4.0)
    defect_sectors: tuple[int, ...] = ()
    defect_factor: float = 0.5
    baseline: float = 0.05
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.cavity_radius <= 0 or self.rv_radius <= 0:
            raise DataError("phantom radii must be positive")
        if self.wall_thickness < 3:
            raise DataError("wall thickness must be >= 3 px")
        for c in (self.bg_curve, self.myo_curve, self.lv_curve, self.rv_curve):
            if c.amplitude < 0:
                raise DataError("enhancement curves must be non-negative")


def _disk(size: int, center: tuple[float, float], radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return np.hypot(xx - center[0], yy - center[1]) < radius


def gen_phantom(spec: PhantomSpec) -> tuple[ImageSeries, LabelMask, tuple[float, float]]:
    """Annular-myocardium phantom with leading RV, then LV, then myocardial
    enhancement. Returns (series, ground truth, RV blob centroid)."""
    size = spec.size
    outer_r = spec.cavity_radius + spec.wall_thickness
    for (cx, cy), r in (
        (spec.lv_center, outer_r),
        (spec.rv_center, spec.rv_radius),
    ):
        if cx - r < 0 or cy - r < 0 or cx + r >= size or cy + r >= size:
            raise DataError("phantom geometry exceeds image bounds")
    cavity = _disk(size, spec.lv_center, spec.cavity_radius)
    ring = _disk(size, spec.lv_center, outer_r) & ~cavity
    rv = _disk(size, spec.rv_center, spec.rv_radius) & ~(cavity | ring)
    labels = np.zeros((size, size), dtype=np.uint8)
    labels[ring] = MYOCARDIUM
    labels[cavity | rv] = BLOODPOOL

    t = np.arange(spec.n_frames, dtype=np.float64) * spec.dt_s
    curves = {
        "bg": spec.bg_curve(t),
        "myo": spec.myo_curve(t),
        "lv": spec.lv_curve(t),
        "rv": spec.rv_curve(t),
    }
    data = np.empty((spec.n_frames, size, size), dtype=np.float64)
    data[:] = spec.baseline + curves["bg"][:, None, None]
    data[:, ring] = spec.baseline + curves["myo"][:, None]
    if spec.defect_sectors:
        defect = _defect_region(spec, ring)
        data[:, defect] = spec.baseline + spec.defect_factor * curves["myo"][:, None]
    data[:, cavity] = spec.baseline + curves["lv"][:, None]
    data[:, rv] = spec.baseline + curves["rv"][:, None]
    if spec.noise_sigma > 0:
        rng = substream(spec.seed, DOM_PHANTOM)
        data += rng.normal(0.0, spec.noise_sigma, size=data.shape)
    np.clip(data, 0.0, 1.0, out=data)

    times = np.arange(spec.n_frames, dtype=np.float64) * spec.dt_s
    series = ImageSeries(data.astype(np.float32), spec.spacing_mm, times)
    ys, xs = np.nonzero(rv)
    rv_centroid = (float(xs.mean()), float(ys.mean()))
    return series, LabelMask(labels), rv_centroid


def phantom_prototypes(spec: PhantomSpec) -> np.ndarray:
    """Class prototype curves (background, myocardium, bloodpool) at the
    phantom's frame times; the bloodpool prototype follows the LV curve."""
    t = np.arange(spec.n_frames, dtype=np.float64) * spec.dt_s
    return np.stack(
        [
            spec.baseline + spec.bg_curve(t),
            spec.baseline + spec.myo_curve(t),
            spec.baseline + spec.lv_curve(t),
        ]
    )


def _defect_region(spec: PhantomSpec, ring: np.ndarray) -> np.ndarray:
    """Myocardial pixels inside the configured 60-degree sectors (sector 1
    starts 30 degrees past the RV direction, matching the sector metric)."""
    ys, xs = np.nonzero(ring)
    cx, cy = spec.lv_center
    rvx, rvy = spec.rv_center
    anchor = math.atan2(rvy - cy, rvx - cx) + math.pi / 6.0
    rel = np.mod(np.arctan2(ys - cy, xs - cx) - anchor, 2 * math.pi)
    seg = 1 + np.minimum((rel / (math.pi / 3.0)).astype(np.int64), 5)
    keep = np.isin(seg, spec.defect_sectors)
    out = np.zeros_like(ring)
    out[ys[keep], xs[keep]] = True
    return out


# ---------------------------------------------------------------------------
# Dataset-shift transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShiftTransform:
    rotation_deg: float = 0.0
    shear_deg: float = 0.0
    translation_px: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    gamma: float = 1.0
    flatfield_sigma: float = 0.0
    noise_sigma: float = 0.0
    coil_amplitude: float = 0.0

    # sampling ranges (also the normalizers for shift_magnitude)
    ROT_MAX = 60.0
    SHEAR_MAX = 10.0
    TRANS_MAX = 2.0
    SCALE_DEV_MAX = 0.2
    GAMMA_DEV_MAX = 0.5
    FLAT_MAX = 5.0
    NOISE_MAX = 0.03
    COIL_MAX = 0.25

    def __post_init__(self):
        tx, ty = self.translation_px
        checks = [
            abs(self.rotation_deg) <= self.ROT_MAX,
            abs(self.shear_deg) <= self.SHEAR_MAX,
            abs(tx) <= self.TRANS_MAX and abs(ty) <= self.TRANS_MAX,
            abs(self.scale - 1.0) <= self.SCALE_DEV_MAX + 1e-12,
            abs(self.gamma - 1.0) <= self.GAMMA_DEV_MAX + 1e-12,
            0.0 <= self.flatfield_sigma <= self.FLAT_MAX,
            0.0 <= self.noise_sigma <= self.NOISE_MAX,
            0.0 <= self.coil_amplitude <= self.COIL_MAX,
        ]
        if not all(checks):
            raise DataError("shift transform parameters outside the allowed ranges")

    def magnitude(self) -> float:
        """Mean of the range-normalized absolute parameters, in [0, 1]."""
        tx, ty = self.translation_px
        parts = [
            abs(self.rotation_deg) / self.ROT_MAX,
            abs(self.shear_deg) / self.SHEAR_MAX,
            abs(tx) / self.TRANS_MAX,
            abs(ty) / self.TRANS_MAX,
            abs(self.scale - 1.0) / self.SCALE_DEV_MAX,
            abs(self.gamma - 1.0) / self.GAMMA_DEV_MAX,
            self.flatfield_sigma / self.FLAT_MAX,
            self.noise_sigma / self.NOISE_MAX,
            self.coil_amplitude / self.COIL_MAX,
        ]
        return float(np.mean(parts))

    def is_identity_affine(self) -> bool:
        return (
            self.rotation_deg == 0.0
            and self.shear_deg == 0.0
            and self.translation_px == (0.0, 0.0)
            and self.scale == 1.0
        )


def random_shift(rng: np.random.Generator) -> ShiftTransform:
    """Draw a transform uniformly inside the allowed ranges; gamma and
    flat-field each activate with probability one half."""
    gamma = 1.0 + rng.uniform(-0.5, 0.5) if rng.random() < 0.5 else 1.0
    flat = rng.uniform(0.0, 5.0) if rng.random() < 0.5 else 0.0
    return ShiftTransform(
        rotation_deg=rng.uniform(-60.0, 60.0),
        shear_deg=rng.uniform(-10.0, 10.0),
        translation_px=(rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)),
        scale=1.0 + rng.uniform(-0.2, 0.2),
        gamma=gamma,
        flatfield_sigma=flat,
        noise_sigma=rng.uniform(0.0, ShiftTransform.NOISE_MAX),
        coil_amplitude=rng.uniform(0.0, ShiftTransform.COIL_MAX),
    )


def _affine_matrix(t: ShiftTransform, h: int, w: int) -> np.ndarray:
    """Forward output<-input mapping is applied inverse; build it about the center."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = math.radians(t.rotation_deg)
    sh = math.tan(math.radians(t.shear_deg))
    s = t.scale
    # row/col (y, x) convention
    lin = np.array(
        [
            [s * math.cos(th), s * (math.sin(th) + sh * math.cos(th))],
            [-s * math.sin(th), s * (math.cos(th) - sh * math.sin(th))],
        ]
    )
    tx, ty = t.translation_px
    offset = np.array([cy + ty, cx + tx]) - lin @ np.array([cy, cx])
    return lin, offset


def apply_shift(
    series: ImageSeries,
    gt_mask: LabelMask,
    t: ShiftTransform,
    rng: np.random.Generator,
) -> tuple[ImageSeries, LabelMask, float]:
    """Warp image and mask with the segmentation-variant components, then apply
    the photometric (segmentation-invariant) components to the image alone."""
    data = series.data.astype(np.float64)
    labels = gt_mask.labels
    if not t.is_identity_affine():
        lin, offset = _affine_matrix(t, series.height, series.width)
        inv = np.linalg.inv(lin)
        inv_off = -inv @ offset
        warped = np.empty_like(data)
        for i in range(data.shape[0]):
            warped[i] = ndimage.affine_transform(
                data[i], inv, offset=inv_off, order=1, mode="constant", cval=0.0
            )
        data = warped
        labels = ndimage.affine_transform(
            labels, inv, offset=inv_off, order=0, mode="constant", cval=0
        )
    if t.coil_amplitude > 0.0 or t.flatfield_sigma > 0.0:
        data = data * _coil_surface(series.height, series.width, t, rng)
    if t.gamma != 1.0:
        data = np.clip(data, 0.0, None) ** t.gamma
    if t.noise_sigma > 0.0:
        data = data + rng.normal(0.0, t.noise_sigma, size=data.shape)
    np.clip(data, 0.0, 1.0, out=data)
    out = ImageSeries(data.astype(np.float32), series.spacing_mm, series.frame_times_s)
    return out, LabelMask(labels), t.magnitude()


def _coil_surface(
    h: int, w: int, t: ShiftTransform, rng: np.random.Generator
) -> np.ndarray:
    """Smooth multiplicative intensity surface: a Gaussian bump whose width
    tracks the flat-field sigma and whose height is the coil amplitude."""
    bx = rng.uniform(0.2 * w, 0.8 * w)
    by = rng.uniform(0.2 * h, 0.8 * h)
    amp = t.coil_amplitude if t.coil_amplitude > 0 else 0.1
    width = 0.15 * w * (1.0 + t.flatfield_sigma)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    bump = np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2.0 * width**2))
    return 1.0 + amp * bump


def moco_phantom_pair(
    noise_sigma: float = 0.01, seed: int = 0
) -> tuple[ImageSeries, ImageSeries, PhantomSpec]:
    """Systolic/diastolic analogue pair for the frame-swap corruption study.

    The diastolic series mimics a different slice and cardiac phase: larger
    cavity, thinner wall, and bolus timing shifted late by 1.5 s, so swapped
    frames are temporally inconsistent wherever they land."""
    systolic_spec = PhantomSpec(
        cavity_radius=13.0, wall_thickness=9.0, noise_sigma=noise_sigma, seed=seed
    )
    diastolic_spec = PhantomSpec(
        cavity_radius=18.0,
        wall_thickness=5.0,
        noise_sigma=noise_sigma,
        seed=seed + 1,
        lv_curve=GammaCurve(0.85, 8.5),
        myo_curve=GammaCurve(0.40, 12.5, alpha=3.0, beta_s=3.0),
        rv_curve=GammaCurve(0.75, 5.5),
    )
    systolic, _, _ = gen_phantom(systolic_spec)
    diastolic, _, _ = gen_phantom(diastolic_spec)
    return systolic, diastolic, systolic_spec


def moco_corrupt(
    systolic: ImageSeries,
    diastolic: ImageSeries,
    f: int,
    rng: np.random.Generator,
) -> ImageSeries:
    """Replace f mid-contrast systolic frames with their diastolic counterparts.

    Frame times are untouched so the temporal axis stays consistent."""
    if systolic.data.shape != diastolic.data.shape:
        raise DataError("systolic/diastolic series must share dimensions")
    if f < 0 or f > 4:
        raise DataError("f must be in 0..4")
    if f > systolic.n_frames:
        raise DataError("f exceeds the number of frames")
    if f == 0:
        return systolic
    lo, hi = MOCO_WINDOW
    window = np.arange(lo, min(hi, systolic.n_frames - 1) + 1)
    if window.size < f:
        raise DataError("mid-contrast window smaller than f")
    picks = rng.choice(window, size=f, replace=False)
    data = systolic.data.copy()
    data[np.sort(picks)] = diastolic.data[np.sort(picks)]
    return systolic.with_data(data)


# ---------------------------------------------------------------------------
# Cohort generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CohortCase:
    case_id: int
    series_path: str
    gt_path: str
    rv_centroid: tuple[float, float]
    regime: str
    shift: ShiftTransform
    shift_magnitude: float
    seed: int
    dt_s: float
    spacing_mm: tuple[float, float]


MANIFEST_FIELDS = [
    "case_id",
    "series_path",
    "gt_path",
    "rv_x",
    "rv_y",
    "regime",
    "rotation_deg",
    "shear_deg",
    "trans_x",
    "trans_y",
    "scale",
    "gamma",
    "flatfield_sigma",
    "noise_sigma",
    "coil_amplitude",
    "shift_magnitude",
    "seed",
    "dt_s",
    "spacing_x",
    "spacing_y",
]


def sample_phantom_spec(rng: np.random.Generator, seed: int, size: int = 128) -> PhantomSpec:
    """Per-case randomized geometry and enhancement curves."""
    cavity = rng.uniform(13.0, 18.0)
    wall = rng.uniform(5.0, 8.0)
    margin = cavity + wall + 6.0
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    rv_r = rng.uniform(8.0, 12.0)
    ang = rng.uniform(0.0, 2 * math.pi)
    dist = cavity + wall + rv_r * 0.6
    rvx = float(np.clip(cx + dist * math.cos(ang), rv_r + 1, size - rv_r - 2))
    rvy = float(np.clip(cy + dist * math.sin(ang), rv_r + 1, size - rv_r - 2))
    defect = (int(rng.integers(1, 7)),) if rng.random() < 0.3 else ()
    return PhantomSpec(
        size=size,
        lv_center=(cx, cy),
        cavity_radius=cavity,
        wall_thickness=wall,
        rv_center=(rvx, rvy),
        rv_radius=rv_r,
        myo_curve=GammaCurve(rng.uniform(0.3, 0.5), rng.uniform(10.0, 12.5)),
        lv_curve=GammaCurve(rng.uniform(0.7, 0.9), rng.uniform(6.0, 8.0)),
        rv_curve=GammaCurve(rng.uniform(0.6, 0.85), rng.uniform(3.0, 5.0)),
        defect_sectors=defect,
        noise_sigma=rng.uniform(0.005, 0.02),
        seed=seed,
    )


def gen_cohort(
    n_cases: int,
    out_dir: str | Path,
    regime: str = "none",
    seed: int = 0,
    size: int = 128,
    name: str = "cohort",
) -> Path:
    """Write n phantom cases (+ optional per-case shift) and a manifest CSV."""
    if n_cases < 1:
        raise DataError("cohort needs n >= 1")
    if regime not in ("none", "shifted"):
        raise DataError(f"unknown regime {regime!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_cases):
        rng = substream(seed, DOM_COHORT, i)
        case_seed = int(rng.integers(0, 2**62))
        spec = sample_phantom_spec(rng, seed=case_seed, size=size)
        series, gt, rv = gen_phantom(spec)
        shift = ShiftTransform()
        magnitude = 0.0
        if regime == "shifted":
            shift = random_shift(substream(seed, DOM_SHIFT, i))
            series, gt, magnitude = apply_shift(
                series, gt, shift, substream(seed, DOM_SHIFT, i, 1)
            )
            rv_after = _shifted_rv(gt, rv)
            rv = rv_after if rv_after is not None else rv
        sp = out / f"{name}_{i:03d}_series.fpt"
        gp = out / f"{name}_{i:03d}_gt.fpt"
        write_fpt(sp, series.data)
        write_fpt(gp, gt.labels)
        rows.append(
            CohortCase(
                case_id=i,
                series_path=sp.name,
                gt_path=gp.name,
                rv_centroid=rv,
                regime=regime,
                shift=shift,
                shift_magnitude=magnitude,
                seed=case_seed,
                dt_s=spec.dt_s,
                spacing_mm=spec.spacing_mm,
            )
        )
    manifest = out / f"{name}_manifest.csv"
    write_manifest(manifest, rows)
    return manifest


def _shifted_rv(gt: LabelMask, fallback) -> tuple[float, float] | None:
    from .metrics import rv_centroid_of

    try:
        return rv_centroid_of(gt)
    except DataError:
        return None


def write_manifest(path: str | Path, rows: list[CohortCase]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            t = r.shift
            w.writerow(
                [
                    r.case_id,
                    r.series_path,
                    r.gt_path,
                    f"{r.rv_centroid[0]:.6g}",
                    f"{r.rv_centroid[1]:.6g}",
                    r.regime,
                    f"{t.rotation_deg:.10g}",
                    f"{t.shear_deg:.10g}",
                    f"{t.translation_px[0]:.10g}",
                    f"{t.translation_px[1]:.10g}",
                    f"{t.scale:.10g}",
                    f"{t.gamma:.10g}",
                    f"{t.flatfield_sigma:.10g}",
                    f"{t.noise_sigma:.10g}",
                    f"{t.coil_amplitude:.10g}",
                    f"{r.shift_magnitude:.10g}",
                    r.seed,
                    f"{r.dt_s:.10g}",
                    f"{r.spacing_mm[0]:.10g}",
                    f"{r.spacing_mm[1]:.10g}",
                ]
            )


def read_manifest(path: str | Path) -> list[CohortCase]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            shift = ShiftTransform(
                rotation_deg=float(rec["rotation_deg"]),
                shear_deg=float(rec["shear_deg"]),
                translation_px=(float(rec["trans_x"]), float(rec["trans_y"])),
                scale=float(rec["scale"]),
                gamma=float(rec["gamma"]),
                flatfield_sigma=float(rec["flatfield_sigma"]),
                noise_sigma=float(rec["noise_sigma"]),
                coil_amplitude=float(rec["coil_amplitude"]),
            )
            rows.append(
                CohortCase(
                    case_id=int(rec["case_id"]),
                    series_path=rec["series_path"],
                    gt_path=rec["gt_path"],
                    rv_centroid=(float(rec["rv_x"]), float(rec["rv_y"])),
                    regime=rec["regime"],
                    shift=shift,
                    shift_magnitude=float(rec["shift_magnitude"]),
                    seed=int(rec["seed"]),
                    dt_s=float(rec["dt_s"]),
                    spacing_mm=(float(rec["spacing_x"]), float(rec["spacing_y"])),
                )
            )
    return rows
