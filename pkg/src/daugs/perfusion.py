"""Segment-wise myocardial blood flow by Fermi-constrained deconvolution.

The impulse response is R(t) = F / (1 + exp((t - w) / k)) for t >= 0, shifted
by a fitted delay; MBF is R at time zero. Tissue curves are modeled as the
left-Riemann discrete convolution dt * (aif (*) R). The fit is a damped
(Levenberg-style) least-squares with a monotone objective trace, multi-started
from four fixed initializations.

Signal-to-concentration mapping defaults to the identity; pass a LUT (see
load_lut) to report MBF in true mL/g/min instead of signal-amplitude units.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import MYOCARDIUM, DataError, ImageSeries, LabelMask
from .metrics import agreement_stats, lv_cavity_mask

MAX_ITER = 500
TOL = 1e-8

#: Fixed multi-start (width multiple of dt, delay multiple of dt).
STARTS = ((4.0, 0.0), (10.0, 0.0), (4.0, 2.0), (10.0, 2.0))


@dataclass(frozen=True)
class PerfusionCurves:
    aif: np.ndarray  # (T,)
    tissue: dict  # segment id -> (T,) baseline-corrected mean curve
    dt_s: float
    baseline_frames: int
    missing_segments: tuple[int, ...]

    def __post_init__(self):
        if self.aif.shape[0] < 8:
            raise DataError("perfusion curves need at least 8 frames")
        if self.dt_s <= 0:
            raise DataError("dt_s must be positive")
        if not np.isfinite(self.aif).all():
            raise DataError("AIF must be finite")
        for s, c in self.tissue.items():
            if not np.isfinite(c).all():
                raise DataError(f"tissue curve {s} must be finite")


@dataclass(frozen=True)
class FermiFit:
    amplitude: float  # F
    width_s: float  # w
    decay_s: float  # k
    delay_s: float
    mbf_ml_g_min: float
    residual_rms: float
    converged: bool
    n_iter: int
    objective_trace: tuple[float, ...]


@dataclass(frozen=True)
class MBFResult:
    segments: dict  # segment id -> FermiFit
    missing_segments: tuple[int, ...]
    converged: bool


def load_lut(path: str | Path):
    """Two-column CSV signal -> concentration; must be strictly increasing."""
    sig, conc = [], []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec:
                continue
            sig.append(float(rec[0]))
            conc.append(float(rec[1]))
    s = np.asarray(sig)
    c = np.asarray(conc)
    if s.size < 2 or np.any(np.diff(s) <= 0) or np.any(np.diff(c) <= 0):
        raise DataError("LUT must be two strictly increasing columns")

    def mapper(v):
        return np.interp(v, s, c)

    return mapper


def extract_curves(
    series: ImageSeries,
    mask: LabelMask,
    segments: np.ndarray,
    baseline_frames: int = 3,
    signal_map=None,
) -> PerfusionCurves:
    """AIF from the LV cavity bloodpool, per-sector mean tissue curves, both
    baseline-corrected by the mean of the first `baseline_frames` frames."""
    if not (mask.labels == MYOCARDIUM).any():
        raise DataError("mask has no myocardium")
    cavity = lv_cavity_mask(mask)
    data = series.data.astype(np.float64)
    if signal_map is not None:
        data = signal_map(data)
    aif = data[:, cavity].mean(axis=1)
    aif = aif - aif[:baseline_frames].mean()
    tissue = {}
    missing = []
    for s in range(1, 7):
        region = segments == s
        if not region.any():
            missing.append(s)
            continue
        curve = data[:, region].mean(axis=1)
        tissue[s] = curve - curve[:baseline_frames].mean()
    return PerfusionCurves(
        aif=aif,
        tissue=tissue,
        dt_s=float(series.frame_times_s[1] - series.frame_times_s[0]),
        baseline_frames=baseline_frames,
        missing_segments=tuple(missing),
    )


def fermi_response(tau: np.ndarray, amplitude: float, width: float, decay: float) -> np.ndarray:
    """R(tau) for tau >= 0 (zero before); decay is kept positive by the caller."""
    tau = np.asarray(tau, dtype=np.float64)
    arg = np.clip((tau - width) / decay, -500.0, 500.0)
    return np.where(tau >= 0.0, amplitude / (1.0 + np.exp(arg)), 0.0)


def forward_convolution(
    aif: np.ndarray, dt: float, amplitude: float, width: float, decay: float, delay: float
) -> np.ndarray:
    """Left-Riemann discrete convolution of the AIF with the delayed response."""
    n = aif.shape[0]
    lags = np.arange(n) * dt - delay
    r = fermi_response(lags, amplitude, width, decay)
    r[lags < 0.0] = 0.0
    return dt * np.convolve(aif, r)[:n]


def damped_least_squares(residual_fn, p0, max_iter=MAX_ITER, tol=TOL):
    """Levenberg-style damped Gauss-Newton with a numeric Jacobian.

    Only accepted (objective-decreasing) steps enter the trace; terminates on
    step norm or gradient norm below tol, or at max_iter.
    """
    p = np.asarray(p0, dtype=np.float64).copy()
    r = residual_fn(p)
    obj = float(r @ r)
    trace = [obj]
    lam = 1e-3
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        jac = _numeric_jacobian(residual_fn, p, r)
        g = jac.T @ r
        if np.abs(g).max() < tol:
            converged = True
            break
        jtj = jac.T @ jac
        accepted = False
        for _ in range(40):
            damped = jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-12))
            try:
                step = np.linalg.solve(damped, -g)
            except np.linalg.LinAlgError:
                lam *= 3.0
                continue
            p_new = p + step
            r_new = residual_fn(p_new)
            obj_new = float(r_new @ r_new)
            if obj_new < obj:
                p, r, obj = p_new, r_new, obj_new
                trace.append(obj)
                lam = max(lam * 0.3, 1e-12)
                accepted = True
                break
            lam *= 3.0
            if lam > 1e14:
                break
        if not accepted:
            converged = np.abs(g).max() < 1e-4  # stuck in a flat basin
            break
        if np.linalg.norm(step) < tol:
            converged = True
            break
    return p, tuple(trace), converged, n_iter


def _numeric_jacobian(residual_fn, p, r0):
    jac = np.empty((r0.shape[0], p.shape[0]))
    for i in range(p.shape[0]):
        h = 1e-6 * max(1.0, abs(p[i]))
        q = p.copy()
        q[i] += h
        jac[:, i] = (residual_fn(q) - r0) / h
    return jac


def _decay_of(log_decay: float) -> float:
    # keeps the optimizer from overflowing exp when a trial step runs wild
    return math.exp(min(max(float(log_decay), -20.0), 20.0))


def fermi_fit(tissue: np.ndarray, aif: np.ndarray, dt_s: float) -> FermiFit:
    """Fit the delayed Fermi response so dt*(aif (*) R) matches the tissue curve."""
    tissue = np.asarray(tissue, dtype=np.float64)
    aif = np.asarray(aif, dtype=np.float64)
    if aif.max() <= 0.0:
        raise DataError("AIF has no positive peak")
    unit_peak = float(np.max(dt_s * np.cumsum(aif)))
    if unit_peak <= 0.0:
        raise DataError("AIF integral is not positive")
    f0 = max(float(tissue.max()) / unit_peak, 0.0)

    def residual(theta):
        amplitude, width, log_decay, delay = theta
        model = forward_convolution(
            aif, dt_s, amplitude, width, _decay_of(log_decay), delay
        )
        return model - tissue

    best = None
    for w_mult, d_mult in STARTS:
        p0 = np.array([f0, w_mult * dt_s, math.log(2.0 * dt_s), d_mult * dt_s])
        p, trace, converged, n_iter = damped_least_squares(residual, p0)
        if best is None or trace[-1] < best[1][-1]:
            best = (p, trace, converged, n_iter)
    p, trace, converged, n_iter = best
    if not converged:
        warnings.warn("Fermi fit did not converge from any start; result retained")
    amplitude, width, log_decay, delay = (float(v) for v in p)
    decay = _decay_of(log_decay)
    mbf = max(0.0, amplitude / (1.0 + math.exp(np.clip(-width / decay, -500.0, 500.0))))
    return FermiFit(
        amplitude=amplitude,
        width_s=width,
        decay_s=decay,
        delay_s=delay,
        mbf_ml_g_min=mbf,
        residual_rms=math.sqrt(trace[-1] / tissue.shape[0]),
        converged=converged,
        n_iter=n_iter,
        objective_trace=trace,
    )


def mbf_for_mask(
    series: ImageSeries,
    mask: LabelMask,
    rv_centroid,
    baseline_frames: int = 3,
    signal_map=None,
) -> MBFResult:
    from .metrics import aha6_split

    segments = aha6_split(mask, rv_centroid=rv_centroid)
    curves = extract_curves(series, mask, segments, baseline_frames, signal_map)
    fits = {}
    all_ok = True
    for s, tissue in sorted(curves.tissue.items()):
        fit = fermi_fit(tissue, curves.aif, curves.dt_s)
        fits[s] = fit
        all_ok = all_ok and fit.converged
    return MBFResult(
        segments=fits, missing_segments=curves.missing_segments, converged=all_ok
    )


def mbf_table(
    series: ImageSeries,
    method_masks: dict,
    manual_mask: LabelMask,
    rv_centroid,
    out_dir: str | Path | None = None,
    case_id: int = 0,
    signal_map=None,
) -> dict:
    """Per-segment MBF for manual + each automatic method, with agreement
    statistics of every method against manual. Optionally writes CSV + SVGs."""
    from . import svgplot

    results = {"manual": mbf_for_mask(series, manual_mask, rv_centroid, signal_map=signal_map)}
    for name, mask in method_masks.items():
        results[name] = mbf_for_mask(series, mask, rv_centroid, signal_map=signal_map)
    manual = results["manual"]
    report = {"per_segment": {}, "agreement": {}, "excluded": {}}
    for name, res in results.items():
        report["per_segment"][name] = {
            s: fit.mbf_ml_g_min for s, fit in sorted(res.segments.items())
        }
    for name, res in results.items():
        if name == "manual":
            continue
        shared = sorted(set(manual.segments) & set(res.segments))
        excluded = sorted(set(manual.segments) ^ set(res.segments))
        report["excluded"][name] = len(excluded)
        if len(shared) >= 3:
            x = [manual.segments[s].mbf_ml_g_min for s in shared]
            y = [res.segments[s].mbf_ml_g_min for s in shared]
            try:
                report["agreement"][name] = agreement_stats(x, y)
            except DataError:
                report["agreement"][name] = None
        else:
            report["agreement"][name] = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"mbf_case{case_id:03d}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case_id", "segment", "method", "mbf_ml_g_min", "converged"])
            for name, res in sorted(results.items()):
                for s, fit in sorted(res.segments.items()):
                    w.writerow(
                        [case_id, s, name, f"{fit.mbf_ml_g_min:.10g}", int(fit.converged)]
                    )
        for name, res in sorted(results.items()):
            if name == "manual":
                continue
            shared = sorted(set(manual.segments) & set(res.segments))
            if len(shared) < 2:
                continue
            x = [manual.segments[s].mbf_ml_g_min for s in shared]
            y = [res.segments[s].mbf_ml_g_min for s in shared]
            st = report["agreement"].get(name)
            svgplot.scatter(
                out / f"mbf_case{case_id:03d}_{name}_scatter.svg",
                x,
                y,
                title=f"MBF {name} vs manual",
                xlabel="manual MBF (mL/g/min)",
                ylabel=f"{name} MBF (mL/g/min)",
                identity=True,
                fit=(st.slope, st.intercept) if st else None,
            )
            svgplot.bland_altman(
                out / f"mbf_case{case_id:03d}_{name}_bland_altman.svg",
                x,
                y,
                title=f"Bland-Altman {name} vs manual",
                units="mL/g/min",
            )
    return report
