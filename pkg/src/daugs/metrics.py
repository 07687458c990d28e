"""Segmentation quality metrics, failure detection, and agreement statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats
from scipy.spatial import cKDTree

from .core import BLOODPOOL, MYOCARDIUM, DataError, LabelMask

_EIGHT = np.ones((3, 3), dtype=bool)
_FOUR = ndimage.generate_binary_structure(2, 1)

#: Connected components smaller than this do not count toward contiguity checks.
SPECKLE_FLOOR_PX = 3


class MetricUndefined(DataError):
    """Raised when a metric has no value (e.g. HD95 with an absent class)."""


@dataclass(frozen=True)
class FailureReport:
    bloodpool_inclusion: bool
    noncontiguous_segments: tuple[int, ...]
    failed: bool

    def __post_init__(self):
        expect = self.bloodpool_inclusion or bool(self.noncontiguous_segments)
        if self.failed != expect:
            raise DataError("failed flag must mirror the individual criteria")


def _check_dims(a: LabelMask, b: LabelMask) -> None:
    if a.labels.shape != b.labels.shape:
        raise DataError(f"mask shapes differ: {a.labels.shape} vs {b.labels.shape}")


def dice(a: LabelMask, b: LabelMask, cls: int) -> float:
    """2|A n B| / (|A| + |B|); defined as 1 when both masks lack the class."""
    _check_dims(a, b)
    am = a.labels == cls
    bm = b.labels == cls
    denom = int(am.sum()) + int(bm.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(am & bm)) / denom


def _boundary(region: np.ndarray) -> np.ndarray:
    # border_value=0 erodes away image-edge pixels, so they count as boundary
    return region & ~ndimage.binary_erosion(region, structure=_FOUR, border_value=0)


def hd95(a: LabelMask, b: LabelMask, cls: int, spacing_mm: tuple[float, float]) -> float:
    """Undirected 95th-percentile Hausdorff distance in millimeters.

    Pools the two directed nearest-boundary distance sets and takes the 95th
    percentile with linear interpolation between order statistics.
    """
    _check_dims(a, b)
    am = a.labels == cls
    bm = b.labels == cls
    if not am.any() or not bm.any():
        raise MetricUndefined(f"class {cls} absent from one mask; HD95 undefined")
    dx, dy = spacing_mm
    scale = np.array([dy, dx], dtype=np.float64)  # rows are y, columns are x
    pa = np.argwhere(_boundary(am)) * scale
    pb = np.argwhere(_boundary(bm)) * scale
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))


def lv_cavity_mask(mask: LabelMask) -> np.ndarray:
    """Main LV bloodpool: the largest 8-connected bloodpool component
    (ties broken by lowest component label)."""
    bp = mask.labels == BLOODPOOL
    if not bp.any():
        raise DataError("mask has no bloodpool pixels")
    comp, n = ndimage.label(bp, structure=_EIGHT)
    sizes = ndimage.sum_labels(bp, comp, index=np.arange(1, n + 1))
    return comp == (1 + int(np.argmax(sizes)))


def rv_centroid_of(mask: LabelMask) -> tuple[float, float] | None:
    """Centroid (x, y) of the non-LV bloodpool material, or None if absent."""
    bp = mask.labels == BLOODPOOL
    if not bp.any():
        return None
    rv = bp & ~lv_cavity_mask(mask)
    if not rv.any():
        return None
    ys, xs = np.nonzero(rv)
    return float(xs.mean()), float(ys.mean())


def _lv_center(mask: LabelMask) -> tuple[float, float]:
    if (mask.labels == BLOODPOOL).any():
        cav = lv_cavity_mask(mask)
        ys, xs = np.nonzero(cav)
    else:
        ys, xs = np.nonzero(mask.labels == MYOCARDIUM)
    return float(xs.mean()), float(ys.mean())


def aha6_split(
    mask: LabelMask,
    rv_centroid: tuple[float, float] | None = None,
    rv_direction: tuple[float, float] | None = None,
) -> np.ndarray:
    """Assign each myocardial pixel a sector id 1..6 by angle about the LV center.

    Sector 1 starts 30 degrees past the RV direction so that direction bisects
    the boundary between sectors 6 and 1; ids advance with increasing angle.
    Returns an (h, w) uint8 array, 0 outside the myocardium.
    """
    myo = mask.labels == MYOCARDIUM
    if not myo.any():
        raise DataError("empty myocardium: cannot split into sectors")
    cx, cy = _lv_center(mask)
    if rv_direction is not None:
        ddx, ddy = rv_direction
    elif rv_centroid is not None:
        ddx, ddy = rv_centroid[0] - cx, rv_centroid[1] - cy
    else:
        raise DataError("aha6_split needs rv_centroid or rv_direction")
    if ddx == 0 and ddy == 0:
        raise DataError("degenerate RV direction")
    anchor = math.atan2(ddy, ddx) + math.pi / 6.0
    ys, xs = np.nonzero(myo)
    theta = np.arctan2(ys - cy, xs - cx)
    rel = np.mod(theta - anchor, 2.0 * math.pi)
    seg = 1 + np.minimum((rel / (math.pi / 3.0)).astype(np.int64), 5)
    out = np.zeros(mask.labels.shape, dtype=np.uint8)
    out[ys, xs] = seg
    return out


def detect_failure(
    mask: LabelMask,
    segments: np.ndarray,
    min_component_px: int = SPECKLE_FLOOR_PX,
) -> FailureReport:
    """Check the two visual failure criteria.

    Bloodpool inclusion: a bloodpool component other than the main LV cavity
    occupies a hole enclosed by the myocardium. Noncontiguous segment: the
    myocardial pixels of one sector split into more than one 8-connected
    component. The min_component_px speckle guard applies to both criteria,
    matching their visual-inspection origin.
    """
    myo = mask.labels == MYOCARDIUM
    bp = mask.labels == BLOODPOOL
    inclusion = False
    if myo.any() and bp.any():
        filled = ndimage.binary_fill_holes(myo)
        holes = filled & ~myo
        bp_in_holes = bp & holes
        if bp_in_holes.any():
            comp, n = ndimage.label(bp, structure=_EIGHT)
            sizes = ndimage.sum_labels(bp, comp, index=np.arange(1, n + 1))
            main = 1 + int(np.argmax(sizes))
            offenders = np.unique(comp[bp_in_holes])
            inclusion = any(
                c != main and sizes[c - 1] >= min_component_px for c in offenders
            )
    bad_segments = []
    for s in range(1, 7):
        seg_mask = segments == s
        if not seg_mask.any():
            continue
        comp, n = ndimage.label(seg_mask, structure=_EIGHT)
        if n <= 1:
            continue
        sizes = ndimage.sum_labels(seg_mask, comp, index=np.arange(1, n + 1))
        if int(np.count_nonzero(sizes >= min_component_px)) > 1:
            bad_segments.append(s)
    bad = tuple(bad_segments)
    return FailureReport(
        bloodpool_inclusion=inclusion,
        noncontiguous_segments=bad,
        failed=inclusion or bool(bad),
    )


# ---------------------------------------------------------------------------
# Agreement and comparison statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AgreementStats:
    pearson_r2: float
    slope: float
    intercept: float
    bias: float
    loa_low: float
    loa_high: float
    spearman_rho: float


def agreement_stats(x, y) -> AgreementStats:
    """OLS of y on x, Bland-Altman bias and 1.96-sigma limits, Spearman rho."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("agreement_stats needs equal-length 1-D samples")
    if x.size < 3:
        raise DataError("agreement_stats needs at least 3 pairs")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise DataError("agreement_stats needs finite samples")
    vx = float(np.var(x))
    if vx == 0.0:
        raise DataError("agreement_stats: zero variance in x")
    cov = float(np.mean((x - x.mean()) * (y - y.mean())))
    slope = cov / vx
    intercept = float(y.mean() - slope * x.mean())
    vy = float(np.var(y))
    r2 = 0.0 if vy == 0.0 else (cov * cov) / (vx * vy)
    d = y - x
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    rho = _spearman(x, y)
    return AgreementStats(
        pearson_r2=r2,
        slope=slope,
        intercept=intercept,
        bias=bias,
        loa_low=bias - 1.96 * sd,
        loa_high=bias + 1.96 * sd,
        spearman_rho=rho,
    )


def _spearman(x: np.ndarray, y: np.ndarray) -> float:
    rx = stats.rankdata(x, method="average")
    ry = stats.rankdata(y, method="average")
    vx = rx.var()
    vy = ry.var()
    if vx == 0.0 or vy == 0.0:
        return 0.0
    return float(np.mean((rx - rx.mean()) * (ry - ry.mean())) / math.sqrt(vx * vy))


def paired_tests(a, b) -> dict[str, float]:
    """Two-tailed paired t and Wilcoxon signed-rank p-values.

    Identical samples are a defined no-difference case (p = 1) rather than an
    error, so pooled comparisons never blow up on ties.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise DataError("paired_tests needs two equal-length samples, n >= 2")
    d = a - b
    if np.all(d == 0.0):
        return {"t_p_value": 1.0, "wilcoxon_p_value": 1.0}
    if float(d.std(ddof=1)) == 0.0:
        t_p = 0.0  # constant nonzero difference
    else:
        t_p = float(stats.ttest_rel(a, b).pvalue)
    nz = d[d != 0.0]
    if nz.size == 0:
        w_p = 1.0
    else:
        w_p = float(stats.wilcoxon(a, b, zero_method="wilcox").pvalue)
    return {"t_p_value": t_p, "wilcoxon_p_value": w_p}


def fisher_exact(k1: int, n1: int, k2: int, n2: int) -> float:
    """Exact two-tailed p for k1/n1 vs k2/n2 event counts."""
    if not (0 <= k1 <= n1 and 0 <= k2 <= n2) or n1 == 0 or n2 == 0:
        raise DataError("fisher_exact needs 0 <= k <= n with n > 0")
    table = [[k1, n1 - k1], [k2, n2 - k2]]
    return float(stats.fisher_exact(table, alternative="two-sided")[1])
