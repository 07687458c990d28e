"""Segmenter abstraction: space-time patch in, 3-class probability map out.

Built-in reference segmenters (oracle, perturbed oracle, curve matching)
exist so the whole pipeline can be verified without any trained model;
real models plug in through the DAUGS-WIRE backend protocol.
"""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import (
    BACKGROUND,
    BLOODPOOL,
    DOM_MODEL_CASE,
    DOM_MODEL_PATCH,
    DOM_POOL,
    MYOCARDIUM,
    DataError,
    LabelMask,
    substream,
)
from .patching import PatchPrediction
from .wire import DEFAULT_TIMEOUT_S, BackendClient

KINDS = ("oracle", "perturbed_oracle", "curve_matching", "external")

# How strongly the case's dataset-shift magnitude (times the member's
# shift_sensitivity) degrades a perturbed oracle. Systematic components hurt
# accuracy; per-patch components raise inter-patch disagreement.
BIAS_GAIN = 2.5  # px of fixed boundary bias per unit degradation
PATCH_JITTER_GAIN = 2.0  # px of per-patch boundary jitter
NOISE_GAIN = 0.35  # added per-pixel label-flip probability
BLOB_PROB_GAIN = 0.8  # chance of a fixed wrong-label blob
BLOB_RADIUS_GAIN = 6.0  # px of blob radius
#: Label-flip noise concentrates within this distance of the myocardium;
#: outside the band the flip probability is squared (models confuse boundary
#: pixels, not arbitrary far-field background).
NOISE_BAND_PX = 6.0

_CROSS = ndimage.generate_binary_structure(2, 1)
_ONEHOT = np.eye(3, dtype=np.float32)


@dataclass(frozen=True)
class SegmenterSpec:
    """Pool-member description; which fields matter depends on `kind`."""

    kind: str
    model_id: int
    # perturbed_oracle
    jitter_px: float = 0.0
    noise_rate: float = 0.0
    shift_sensitivity: float = 0.0
    # curve_matching
    prototypes: tuple[tuple[float, ...], ...] | None = None
    temperature: float = 0.2
    outlier_gain: float = 10.0
    # external
    backend_cmd: tuple[str, ...] | None = None
    timeout_s: float = DEFAULT_TIMEOUT_S
    # pool bookkeeping
    run_id: int | None = None
    checkpoint_id: int | None = None
    validation_dice: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown segmenter kind {self.kind!r}")
        for name in ("jitter_px", "noise_rate", "shift_sensitivity"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise DataError(f"{name} must be finite and non-negative")
        if self.noise_rate > 1.0:
            raise DataError("noise_rate must be <= 1")
        if self.kind == "external" and not self.backend_cmd:
            raise DataError("external segmenters need a backend command")


@dataclass(frozen=True)
class CaseContext:
    """Per-case information built-in segmenters may rely on."""

    case_id: int
    seed: int
    gt_mask: LabelMask | None = None
    shift_magnitude: float = 0.0


def validate_pool(pool: list[SegmenterSpec]) -> None:
    ids = [s.model_id for s in pool]
    if len(set(ids)) != len(ids):
        raise DataError("model_id values must be unique within a pool")


class Segmenter:
    """Deterministic mapping (patch volume, origin) -> (p, p, 3) probabilities."""

    def segment_patch(self, volume: np.ndarray, origin: tuple[int, int]) -> np.ndarray:
        raise NotImplementedError

    def close(self) -> None:
        pass


class OracleSegmenter(Segmenter):
    def __init__(self, spec: SegmenterSpec, ctx: CaseContext):
        if ctx.gt_mask is None:
            raise DataError("oracle segmenters need the case ground truth")
        self._labels = ctx.gt_mask.labels

    def segment_patch(self, volume, origin):
        x0, y0 = origin
        p = volume.shape[1]
        return _ONEHOT[self._labels[y0 : y0 + p, x0 : x0 + p]]


class PerturbedOracleSegmenter(Segmenter):
    """Oracle corrupted like an imperfect fixed model.

    Per (case, model): a fixed boundary bias and, at high degradation, a fixed
    wrong-label blob; both survive patch averaging and genuinely hurt the
    solution. Per patch: boundary jitter and label-flip noise, which make
    overlapping patches disagree and therefore surface in the U-map. All
    randomness is keyed substreams, so a member is a fixed deterministic model.
    """

    def __init__(self, spec: SegmenterSpec, ctx: CaseContext):
        if ctx.gt_mask is None:
            raise DataError("perturbed oracle segmenters need the case ground truth")
        self._spec = spec
        self._ctx = ctx
        gt = ctx.gt_mask.labels
        degradation = ctx.shift_magnitude * spec.shift_sensitivity
        self._noise = min(1.0, spec.noise_rate + NOISE_GAIN * degradation)
        self._patch_jitter = spec.jitter_px + PATCH_JITTER_GAIN * degradation
        self._fill = _nearest_nonmyo_labels(gt)
        myo = gt == MYOCARDIUM
        if myo.any():
            band = ndimage.distance_transform_edt(~myo) <= NOISE_BAND_PX
        else:
            band = np.zeros_like(myo)
        self._flip_p = np.where(band, self._noise, self._noise * self._noise)
        ms = substream(ctx.seed, DOM_MODEL_CASE, ctx.case_id, spec.model_id)
        bias_range = spec.jitter_px + BIAS_GAIN * degradation
        bias = int(round(ms.uniform(-bias_range, bias_range))) if bias_range > 0 else 0
        base = _morph_labels(gt, self._fill, bias)
        blob_p = min(1.0, BLOB_PROB_GAIN * degradation)
        if blob_p > 0 and ms.random() < blob_p:
            base = _wrong_blob(base, ms, radius=2.0 + ms.random() * BLOB_RADIUS_GAIN * degradation)
        self._base = base

    def segment_patch(self, volume, origin):
        x0, y0 = origin
        p = volume.shape[1]
        labels = self._base[y0 : y0 + p, x0 : x0 + p]
        rng = substream(
            self._ctx.seed,
            DOM_MODEL_PATCH,
            self._ctx.case_id,
            self._spec.model_id,
            y0,
            x0,
        )
        if self._patch_jitter > 0:
            r = int(round(rng.uniform(-self._patch_jitter, self._patch_jitter)))
            labels = _morph_labels(labels, self._fill[y0 : y0 + p, x0 : x0 + p], r)
        if self._noise > 0:
            flips = rng.random((p, p)) < self._flip_p[y0 : y0 + p, x0 : x0 + p]
            if flips.any():
                # background and bloodpool confuse each other; myocardium flips
                # to a random other class. No pixel ever flips INTO myocardium,
                # so noise cannot fabricate myocardial fragments.
                alt = rng.integers(0, 2, size=(p, p), dtype=np.int64)
                away = np.where(
                    labels == BACKGROUND,
                    BLOODPOOL,
                    np.where(labels == BLOODPOOL, BACKGROUND, np.where(alt == 1, BACKGROUND, BLOODPOOL)),
                )
                labels = np.where(flips, away, labels)
        return _ONEHOT[labels.astype(np.uint8)]


def _nearest_nonmyo_labels(gt: np.ndarray) -> np.ndarray:
    """For every pixel, the ground-truth label of the nearest non-myocardium pixel."""
    myo = gt == MYOCARDIUM
    if not myo.any():
        return gt.copy()
    if myo.all():
        return np.zeros_like(gt)
    _, (iy, ix) = ndimage.distance_transform_edt(myo, return_indices=True)
    return gt[iy, ix]


def _morph_labels(labels: np.ndarray, fill: np.ndarray, r: int) -> np.ndarray:
    """Dilate (r > 0) or erode (r < 0) the myocardium by a city-block radius;
    eroded pixels revert to the nearest non-myocardium label."""
    if r == 0:
        return labels
    m = labels == MYOCARDIUM
    if not m.any():
        return labels
    if r > 0:
        m2 = ndimage.binary_dilation(m, structure=_CROSS, iterations=r)
    else:
        m2 = ndimage.binary_erosion(m, structure=_CROSS, iterations=-r)
    out = labels.copy()
    out[m & ~m2] = fill[m & ~m2]
    out[m2 & ~m] = MYOCARDIUM
    return out


def _wrong_blob(labels: np.ndarray, rng: np.random.Generator, radius: float) -> np.ndarray:
    """Fixed confusion region: a disk around a random myocardial pixel turns bloodpool."""
    ys, xs = np.nonzero(labels == MYOCARDIUM)
    if ys.size == 0:
        return labels
    k = int(rng.integers(0, ys.size))
    cy, cx = int(ys[k]), int(xs[k])
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w]
    disk = (np.hypot(xx - cx, yy - cy) <= radius) & (labels == MYOCARDIUM)
    out = labels.copy()
    out[disk] = BLOODPOOL
    return out


# ---------------------------------------------------------------------------
# Curve matching
# ---------------------------------------------------------------------------


def _zscore_rows(curves: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-population-std per row; constant rows become zero."""
    m = curves.mean(axis=-1, keepdims=True)
    s = np.sqrt(np.mean((curves - m) ** 2, axis=-1, keepdims=True))
    return np.where(s > 1e-12, (curves - m) / np.where(s > 1e-12, s, 1.0), 0.0)


def _softmax(scores: np.ndarray, axis: int = 0) -> np.ndarray:
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _moving_median5(v: np.ndarray) -> np.ndarray:
    """Median over the index window [t-2, t+2], truncated at the ends.

    numpy's even-window convention (mean of the two middle order statistics)
    applies at the second and second-to-last samples; frozen so external
    reimplementations can match bit-for-bit in double precision.
    """
    n = v.shape[0]
    out = np.empty(n, dtype=np.float64)
    for t in range(n):
        out[t] = np.median(v[max(0, t - 2) : min(n, t + 3)])
    return out


def frame_weights(curves: np.ndarray, outlier_gain: float) -> np.ndarray:
    """Per-frame robustness weights for one patch.

    Frames whose patch-mean intensity departs from its 5-frame moving median
    (temporal inconsistency, e.g. failed motion correction) are down-weighted:
    w_t = 1 / (1 + gain * r_t^2), normalized to mean 1. Because the weights
    derive from the patch context, overlapping windows respond differently to
    inconsistent frames, which is what the uncertainty map measures.
    """
    t = curves.shape[1]
    if outlier_gain <= 0:
        return np.ones(t, dtype=np.float64)
    m = _zscore_rows(curves.mean(axis=0)[None, :])[0]
    r = np.abs(m - _moving_median5(m))
    w = 1.0 / (1.0 + outlier_gain * r * r)
    return w / w.mean()


def curve_match_probs(
    volume: np.ndarray,
    prototypes_z: np.ndarray,
    temperature: float,
    outlier_gain: float,
) -> np.ndarray:
    """Match per-pixel time curves against class prototype curves.

    Scores are a softmax over the negative weighted-RMS distance between the
    z-scored pixel curve and each (z-scored) prototype at the given
    temperature; the frame weights come from `frame_weights`.
    """
    t, ph, pw = volume.shape
    curves = volume.reshape(t, -1).astype(np.float64).T  # (n, T)
    z = _zscore_rows(curves)
    w_t = frame_weights(curves, outlier_gain)
    diff2 = (z[None, :, :] - prototypes_z[:, None, :]) ** 2  # (3, n, T)
    d = np.sqrt(np.sum(diff2 * w_t[None, None, :], axis=2) / t)
    probs = _softmax(-d / temperature, axis=0)  # (3, n)
    return probs.T.reshape(ph, pw, 3).astype(np.float32)


class CurveMatchingSegmenter(Segmenter):
    def __init__(self, spec: SegmenterSpec, ctx: CaseContext | None = None):
        if spec.prototypes is None:
            raise DataError("curve_matching segmenters need 3 prototype curves")
        protos = np.asarray(spec.prototypes, dtype=np.float64)
        if protos.ndim != 2 or protos.shape[0] != 3:
            raise DataError("prototypes must be 3 x T")
        std = np.sqrt(np.mean((protos - protos.mean(axis=1, keepdims=True)) ** 2, axis=1))
        if np.any(std <= 1e-12):
            raise DataError("zero-variance prototype curve")
        self._q = _zscore_rows(protos)
        self._tau = spec.temperature
        self._gain = spec.outlier_gain

    def segment_patch(self, volume, origin):
        return curve_match_probs(volume, self._q, self._tau, self._gain)


class ExternalSegmenter(Segmenter):
    def __init__(self, spec: SegmenterSpec, patch: int, n_frames: int):
        self._client = BackendClient(
            spec.backend_cmd,
            patch=patch,
            n_frames=n_frames,
            timeout_s=spec.timeout_s,
            model_id=spec.model_id,
        )

    def segment_patch(self, volume, origin):
        return self._client.segment(volume)

    def close(self):
        self._client.close()


def make_segmenter(
    spec: SegmenterSpec,
    ctx: CaseContext,
    patch: int = 64,
    n_frames: int = 30,
) -> Segmenter:
    if spec.kind == "oracle":
        return OracleSegmenter(spec, ctx)
    if spec.kind == "perturbed_oracle":
        return PerturbedOracleSegmenter(spec, ctx)
    if spec.kind == "curve_matching":
        return CurveMatchingSegmenter(spec, ctx)
    if spec.kind == "external":
        return ExternalSegmenter(spec, patch=patch, n_frames=n_frames)
    raise DataError(f"unknown segmenter kind {spec.kind!r}")


def segment_patch(
    spec: SegmenterSpec,
    volume: np.ndarray,
    ctx: CaseContext,
    origin: tuple[int, int] = (0, 0),
    patch_index: int = 0,
) -> PatchPrediction:
    """One-off segmentation of a single patch (spawns and closes external backends)."""
    seg = make_segmenter(spec, ctx, patch=volume.shape[1], n_frames=volume.shape[0])
    try:
        return PatchPrediction(patch_index, seg.segment_patch(volume, origin))
    finally:
        seg.close()


# ---------------------------------------------------------------------------
# Pool construction and persistence
# ---------------------------------------------------------------------------


def perturbed_pool_candidates(
    seed: int, n_runs: int = 5, per_run: int = 12
) -> list[SegmenterSpec]:
    """Seeded candidate pool mimicking checkpoints from independent training
    runs: similar baseline quality, heterogeneous shift sensitivity."""
    out = []
    model_id = 0
    for run in range(n_runs):
        for ck in range(per_run):
            rng = substream(seed, DOM_POOL, run, ck)
            out.append(
                SegmenterSpec(
                    kind="perturbed_oracle",
                    model_id=model_id,
                    jitter_px=float(rng.uniform(0.0, 0.6)),
                    noise_rate=float(rng.uniform(0.005, 0.04)),
                    shift_sensitivity=float(rng.uniform(0.15, 1.0)),
                    run_id=run,
                    checkpoint_id=ck,
                )
            )
            model_id += 1
    return out


def write_prototypes_csv(path: str | Path, protos: np.ndarray) -> None:
    protos = np.asarray(protos, dtype=np.float64)
    if protos.ndim != 2 or protos.shape[0] != 3:
        raise DataError("prototypes must be 3 x T")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in protos:
            w.writerow([f"{v:.10g}" for v in row])


def read_prototypes_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in rec] for rec in csv.reader(fh) if rec]
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != 3:
        raise DataError(f"prototype file must hold 3 rows, got shape {arr.shape}")
    return arr


def save_pool_cfg(path: str | Path, pool: list[SegmenterSpec]) -> None:
    cfg = configparser.ConfigParser()
    for s in pool:
        sec = f"model:{s.model_id}"
        cfg[sec] = {"kind": s.kind}
        if s.kind == "perturbed_oracle":
            cfg[sec]["jitter_px"] = f"{s.jitter_px:.10g}"
            cfg[sec]["noise_rate"] = f"{s.noise_rate:.10g}"
            cfg[sec]["shift_sensitivity"] = f"{s.shift_sensitivity:.10g}"
        if s.kind == "curve_matching" and s.prototypes is not None:
            cfg[sec]["prototypes"] = ";".join(
                ",".join(f"{v:.10g}" for v in row) for row in s.prototypes
            )
            cfg[sec]["temperature"] = f"{s.temperature:.10g}"
            cfg[sec]["outlier_gain"] = f"{s.outlier_gain:.10g}"
        if s.kind == "external" and s.backend_cmd:
            cfg[sec]["backend"] = " ".join(s.backend_cmd)
            cfg[sec]["timeout_s"] = f"{s.timeout_s:.10g}"
        if s.run_id is not None:
            cfg[sec]["run"] = str(s.run_id)
        if s.checkpoint_id is not None:
            cfg[sec]["checkpoint"] = str(s.checkpoint_id)
        if s.validation_dice is not None:
            cfg[sec]["validation_dice"] = f"{s.validation_dice:.10g}"
    with open(path, "w") as fh:
        cfg.write(fh)


def load_pool_cfg(path: str | Path) -> list[SegmenterSpec]:
    cfg = configparser.ConfigParser()
    if not cfg.read(path):
        raise DataError(f"cannot read pool config {path}")
    pool = []
    for sec in cfg.sections():
        if not sec.startswith("model:"):
            continue
        model_id = int(sec.split(":", 1)[1])
        s = cfg[sec]
        prototypes = None
        if "prototypes" in s:
            prototypes = tuple(
                tuple(float(v) for v in row.split(",")) for row in s["prototypes"].split(";")
            )
        backend = tuple(s["backend"].split()) if "backend" in s else None
        pool.append(
            SegmenterSpec(
                kind=s.get("kind", "oracle"),
                model_id=model_id,
                jitter_px=s.getfloat("jitter_px", 0.0),
                noise_rate=s.getfloat("noise_rate", 0.0),
                shift_sensitivity=s.getfloat("shift_sensitivity", 0.0),
                prototypes=prototypes,
                temperature=s.getfloat("temperature", 0.2),
                outlier_gain=s.getfloat("outlier_gain", 10.0),
                backend_cmd=backend,
                timeout_s=s.getfloat("timeout_s", DEFAULT_TIMEOUT_S),
                run_id=s.getint("run", fallback=None),
                checkpoint_id=s.getint("checkpoint", fallback=None),
                validation_dice=s.getfloat("validation_dice", fallback=None),
            )
        )
    pool.sort(key=lambda s: s.model_id)
    validate_pool(pool)
    return pool
