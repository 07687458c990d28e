"""Space-time patch extraction, recombination, and uncertainty mapping.

Per-pixel recombination runs over the coverage sets Gamma_(x,y) implied by a
sliding grid. All reductions accumulate in float64 over ascending patch index
so results are bit-reproducible regardless of how predictions were produced.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .core import (
    BACKGROUND,
    BLOODPOOL,
    MYOCARDIUM,
    ClassProbabilityMap,
    DataError,
    ImageSeries,
    LabelMask,
    PatchGrid,
    UncertaintyMap,
    write_fpt,
)

DEFAULT_PATCH = 64
#: Reconstruction stride (half patch size) and the much finer U-map stride.
DEFAULT_RECON_STRIDE = 32
DEFAULT_UMAP_STRIDE = 2


@dataclass(frozen=True)
class PatchPrediction:
    """Static 3-class probabilities for one space-time patch."""

    patch_index: int
    probs: np.ndarray  # (patch, patch, 3) float32

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float32)
        if probs.ndim != 3 or probs.shape[2] != 3:
            raise DataError(f"patch prediction must be (p, p, 3), got {probs.shape}")
        sums = probs.sum(axis=2, dtype=np.float64)
        if probs.size and np.abs(sums - 1.0).max() > 1e-6:
            raise DataError("patch prediction probabilities must sum to 1 within 1e-6")
        object.__setattr__(self, "probs", probs)


def _axis_origins(dim: int, patch: int, stride: int) -> list[int]:
    origins = list(range(0, dim - patch + 1, stride))
    if origins[-1] != dim - patch:
        origins.append(dim - patch)
    return origins


@lru_cache(maxsize=32)
def make_grid(h: int, w: int, patch: int, stride: int) -> PatchGrid:
    """Row-major sliding grid with edge-aligned final origins on each axis."""
    if patch > min(h, w):
        raise DataError(f"patch {patch} exceeds image dims {w}x{h}")
    if not (1 <= stride <= patch):
        raise DataError("stride must satisfy 1 <= stride <= patch")
    xs = _axis_origins(w, patch, stride)
    ys = _axis_origins(h, patch, stride)
    origins = tuple((x, y) for y in ys for x in xs)
    return PatchGrid(image_h=h, image_w=w, patch=patch, stride=stride, origins=origins)


def extract_patches(series: ImageSeries, grid: PatchGrid) -> list[np.ndarray]:
    """Sub-volumes (read-only views) at each grid origin across all frames."""
    if (series.height, series.width) != (grid.image_h, grid.image_w):
        raise DataError(
            f"grid {grid.image_w}x{grid.image_h} does not match series "
            f"{series.width}x{series.height}"
        )
    p = grid.patch
    return [series.data[:, y0 : y0 + p, x0 : x0 + p] for x0, y0 in grid.origins]


def _check_preds(n_preds: int, grid: PatchGrid) -> None:
    if n_preds != len(grid):
        raise DataError(f"expected {len(grid)} predictions for the grid, got {n_preds}")


def _pred_arrays(preds) -> list[np.ndarray]:
    return [p.probs if isinstance(p, PatchPrediction) else np.asarray(p) for p in preds]


def mean_probs_array(pred_arrays, grid: PatchGrid) -> np.ndarray:
    """Per-pixel, per-class arithmetic mean over Gamma_(x,y), float64 accumulation."""
    _check_preds(len(pred_arrays), grid)
    p = grid.patch
    acc = np.zeros((grid.image_h, grid.image_w, 3), dtype=np.float64)
    count = np.zeros((grid.image_h, grid.image_w, 1), dtype=np.float64)
    for arr, (x0, y0) in zip(pred_arrays, grid.origins):
        acc[y0 : y0 + p, x0 : x0 + p, :] += arr
        count[y0 : y0 + p, x0 : x0 + p, 0] += 1.0
    if count.min() < 1.0:
        raise DataError("grid leaves pixels uncovered")
    return acc / count


def combine_mean(preds, grid: PatchGrid) -> ClassProbabilityMap:
    """Average the softmax probabilities of every patch covering each pixel."""
    mean = mean_probs_array(_pred_arrays(preds), grid)
    return ClassProbabilityMap(mean.astype(np.float32))


def combine_majority(preds, grid: PatchGrid) -> LabelMask:
    """Myocardium where at least half of the covering patches vote prob > 0.5.

    The remaining pixels fall back to the mean-probability argmax between
    bloodpool and background (ties go to background).
    """
    arrays = _pred_arrays(preds)
    _check_preds(len(arrays), grid)
    p = grid.patch
    votes = np.zeros((grid.image_h, grid.image_w), dtype=np.int32)
    for arr, (x0, y0) in zip(arrays, grid.origins):
        votes[y0 : y0 + p, x0 : x0 + p] += arr[:, :, MYOCARDIUM] > 0.5
    count = grid.coverage_count()
    myo = 2 * votes >= count
    mean = mean_probs_array(arrays, grid)
    labels = np.where(mean[:, :, BLOODPOOL] > mean[:, :, BACKGROUND], BLOODPOOL, BACKGROUND)
    labels = np.where(myo, MYOCARDIUM, labels).astype(np.uint8)
    return LabelMask(labels)


def binarize_smap(mean_probs: ClassProbabilityMap) -> LabelMask:
    """Threshold the averaged probabilities: myocardium at mean >= 0.5 (inclusive),
    then bloodpool at mean >= 0.5, else background."""
    probs = mean_probs.probs
    labels = np.where(probs[:, :, BLOODPOOL] >= 0.5, BLOODPOOL, BACKGROUND)
    labels = np.where(probs[:, :, MYOCARDIUM] >= 0.5, MYOCARDIUM, labels).astype(np.uint8)
    return LabelMask(labels)


def umap_values(myo_channels, grid: PatchGrid) -> np.ndarray:
    """Population std of the myocardium-channel scores over Gamma_(x,y).

    Two passes in float64 (mean, then squared deviations) keep the reduction
    stable; singly-covered pixels get exactly 0.
    """
    _check_preds(len(myo_channels), grid)
    p = grid.patch
    h, w = grid.image_h, grid.image_w
    total = np.zeros((h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.float64)
    for ch, (x0, y0) in zip(myo_channels, grid.origins):
        total[y0 : y0 + p, x0 : x0 + p] += ch
        count[y0 : y0 + p, x0 : x0 + p] += 1.0
    if count.min() < 1.0:
        raise DataError("grid leaves pixels uncovered")
    mean = total / count
    ssq = np.zeros((h, w), dtype=np.float64)
    for ch, (x0, y0) in zip(myo_channels, grid.origins):
        d = ch - mean[y0 : y0 + p, x0 : x0 + p]
        ssq[y0 : y0 + p, x0 : x0 + p] += d * d
    var = ssq / count
    np.maximum(var, 0.0, out=var)
    return np.sqrt(var).astype(np.float32)


def compute_umap(preds, grid: PatchGrid, smap: LabelMask) -> UncertaintyMap:
    """U-map over the grid; the companion S-map supplies n_myo for u_pp."""
    arrays = _pred_arrays(preds)
    channels = [np.asarray(a[:, :, MYOCARDIUM], dtype=np.float64) for a in arrays]
    u = umap_values(channels, grid)
    return UncertaintyMap.from_values(u, smap.class_pixels(MYOCARDIUM))


def u_metrics(umap: UncertaintyMap) -> tuple[float, float]:
    """(u_pp, u_tot) recomputed from the map values and its n_myo."""
    fresh = UncertaintyMap.from_values(umap.u, umap.n_myo)
    return fresh.u_pp, fresh.u_tot


# ---------------------------------------------------------------------------
# Image export (PGM and FPT)
# ---------------------------------------------------------------------------


def write_pgm(path: str | Path, image: np.ndarray, maxval: int) -> None:
    """Binary PGM (P5); 16-bit samples are big-endian per the format."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise DataError("PGM images must be 2-D")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    if maxval > 255:
        payload = img.astype(">u2").tobytes()
    else:
        payload = img.astype(np.uint8).tobytes()
    Path(path).write_bytes(header + payload)


def umap_to_u16(umap: UncertaintyMap) -> np.ndarray:
    """Linear scaling of u in [0, 0.5] onto the full 16-bit range."""
    scaled = np.round(umap.u.astype(np.float64) / 0.5 * 65535.0)
    return np.clip(scaled, 0, 65535).astype(np.uint16)


def export_umap_pgm(path: str | Path, umap: UncertaintyMap) -> None:
    write_pgm(path, umap_to_u16(umap), maxval=65535)


def export_umap_fpt(path: str | Path, umap: UncertaintyMap) -> None:
    write_fpt(path, umap.u)


def mask_to_u8(mask: LabelMask) -> np.ndarray:
    """Label image stretched for viewing (0/128/255 for bg/myo/bp)."""
    lut = np.array([0, 128, 255], dtype=np.uint8)
    return lut[mask.labels]
