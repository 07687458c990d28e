"""End-to-end experiments: pool runs per case, the A/B comparison against the
fixed best-on-validation baseline, the MoCo corruption sweep, pool
heterogeneity reports, and the u_pp vs u_tot metric comparison.

Work parallelizes over cases; every random draw comes from substreams keyed by
(case, model, patch), so reports are byte-identical for any worker count.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import svgplot
from .core import (
    DOM_MOCO,
    MYOCARDIUM,
    BackendError,
    DataError,
    ImageSeries,
    LabelMask,
    SegmentationSolution,
    UncertaintyMap,
    read_fpt,
)
from .metrics import (
    FailureReport,
    MetricUndefined,
    aha6_split,
    detect_failure,
    dice,
    fisher_exact,
    hd95,
    paired_tests,
)
from .patching import (
    binarize_smap,
    combine_mean,
    extract_patches,
    make_grid,
    mask_to_u8,
    umap_to_u16,
    umap_values,
    write_pgm,
)
from .segmenters import CaseContext, SegmenterSpec, make_segmenter
from .selection import checkpoint_filter, daugs_select, established_select
from .synth import moco_corrupt, read_manifest
from .core import substream


@dataclass(frozen=True)
class GridConfig:
    patch: int = 64
    recon_stride: int = 32
    umap_stride: int = 2


@dataclass(frozen=True)
class Case:
    case_id: int
    series: ImageSeries
    gt: LabelMask | None
    rv_centroid: tuple[float, float] | None
    shift_magnitude: float = 0.0
    regime: str = "none"


def load_cohort(manifest_path: str | Path) -> list[Case]:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    cases = []
    for row in read_manifest(manifest_path):
        series_arr = read_fpt(root / row.series_path)
        times = np.arange(series_arr.shape[0], dtype=np.float64) * row.dt_s
        series = ImageSeries(series_arr, row.spacing_mm, times)
        gt = LabelMask(read_fpt(root / row.gt_path))
        cases.append(
            Case(
                case_id=row.case_id,
                series=series,
                gt=gt,
                rv_centroid=row.rv_centroid,
                shift_magnitude=row.shift_magnitude,
                regime=row.regime,
            )
        )
    return cases


def case_context(case: Case, seed: int) -> CaseContext:
    return CaseContext(
        case_id=case.case_id,
        seed=seed,
        gt_mask=case.gt,
        shift_magnitude=case.shift_magnitude,
    )


def solve_probs_mask(series: ImageSeries, grid_cfg: GridConfig, segmenter):
    """Reconstruction pass: sliding patches -> averaged probabilities -> S-map."""
    grid = make_grid(series.height, series.width, grid_cfg.patch, grid_cfg.recon_stride)
    preds = [
        segmenter.segment_patch(vol, origin)
        for vol, origin in zip(extract_patches(series, grid), grid.origins)
    ]
    mean = combine_mean(preds, grid)
    return mean, binarize_smap(mean)


def solve_solution(
    series: ImageSeries, grid_cfg: GridConfig, segmenter, model_id: int
) -> SegmentationSolution:
    """Full per-model analysis: S-map at the reconstruction stride plus the
    U-map at the (finer) U-map stride."""
    mean, mask = solve_probs_mask(series, grid_cfg, segmenter)
    ugrid = make_grid(series.height, series.width, grid_cfg.patch, grid_cfg.umap_stride)
    channels = [
        np.asarray(
            segmenter.segment_patch(vol, origin)[:, :, MYOCARDIUM], dtype=np.float64
        )
        for vol, origin in zip(extract_patches(series, ugrid), ugrid.origins)
    ]
    u = umap_values(channels, ugrid)
    umap = UncertaintyMap.from_values(u, mask.class_pixels(MYOCARDIUM))
    return SegmentationSolution(model_id=model_id, mean_probs=mean, mask=mask, umap=umap)


def run_case(
    series: ImageSeries,
    grid_cfg: GridConfig,
    pool: list[SegmenterSpec],
    ctx: CaseContext,
) -> tuple[list[SegmentationSolution], list[tuple[int, str]]]:
    """Solve the case with every pool member; backend failures isolate that
    member only. Raises if nothing in the pool succeeds."""
    if not pool:
        raise DataError("run_case needs a non-empty pool")
    solutions = []
    failures = []
    for spec in pool:
        segmenter = None
        failed = False
        try:
            segmenter = make_segmenter(spec, ctx, grid_cfg.patch, series.n_frames)
            solutions.append(solve_solution(series, grid_cfg, segmenter, spec.model_id))
        except BackendError as e:
            failures.append((spec.model_id, str(e)))
            failed = True
        finally:
            if segmenter is not None:
                try:
                    segmenter.close()
                except BackendError as e:
                    if not failed:
                        failures.append((spec.model_id, str(e)))
                        solutions = [s for s in solutions if s.model_id != spec.model_id]
    if not solutions:
        raise BackendError(f"every pool member failed: {failures}")
    return solutions, failures


def validation_solver(grid_cfg: GridConfig | None = None, seed: int = 0):
    """(spec, case) -> predicted mask via the reconstruction pipeline."""
    cfg = grid_cfg or GridConfig()

    def solve(spec: SegmenterSpec, case: Case) -> LabelMask:
        ctx = case_context(case, seed)
        segmenter = make_segmenter(spec, ctx, cfg.patch, case.series.n_frames)
        try:
            _, mask = solve_probs_mask(case.series, cfg, segmenter)
        finally:
            segmenter.close()
        return mask

    return solve


def evaluate_mask(case: Case, mask: LabelMask) -> dict:
    """Dice / HD95 (myocardium) against the case truth plus the failure report."""
    d = dice(mask, case.gt, MYOCARDIUM)
    try:
        h = hd95(mask, case.gt, MYOCARDIUM, case.series.spacing_mm)
    except MetricUndefined:
        h = None
    if (mask.labels == MYOCARDIUM).any() and case.rv_centroid is not None:
        segments = aha6_split(mask, rv_centroid=case.rv_centroid)
        report = detect_failure(mask, segments)
    else:
        report = FailureReport(False, (), False)
    return {"dice": d, "hd95": h, "report": report}


# ---------------------------------------------------------------------------
# A/B experiment (adaptive selection vs fixed best-on-validation model)
# ---------------------------------------------------------------------------


_G = "{:.10g}".format


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return _G(v)
    return str(v)


def _ab_case_worker(args):
    case, pool, grid_cfg, seed, metric, established_id = args
    ctx = case_context(case, seed)
    solutions, failures = run_case(case.series, grid_cfg, pool, ctx)
    chosen_idx, _ = daugs_select(solutions, metric=metric)
    daugs_sol = solutions[chosen_idx]
    estab_sol = next((s for s in solutions if s.model_id == established_id), None)
    rows = []
    for method, sol in (("daugs", daugs_sol), ("established", estab_sol)):
        if sol is None:
            rows.append(
                {"case_id": case.case_id, "method": method, "model_id": None,
                 "dice": None, "hd95": None, "failed": None, "n_myo": None,
                 "u_pp": None, "u_tot": None}
            )
            continue
        ev = evaluate_mask(case, sol.mask)
        rows.append(
            {
                "case_id": case.case_id,
                "method": method,
                "model_id": sol.model_id,
                "dice": ev["dice"],
                "hd95": ev["hd95"],
                "failed": int(ev["report"].failed),
                "n_myo": sol.umap.n_myo,
                "u_pp": sol.umap.u_pp,
                "u_tot": sol.umap.u_tot,
            }
        )
    return case.case_id, rows, failures


def _map_cases(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items, chunksize=1))


@dataclass
class ABReport:
    pool: list[SegmenterSpec]
    established_id: int
    case_rows: list[dict]
    summary: list[dict]
    p_values: dict


def experiment_ab(
    internal: list[Case],
    shifted: list[Case],
    candidates: list[SegmenterSpec],
    validation: list[Case],
    out_dir: str | Path,
    seed: int = 0,
    grid_cfg: GridConfig = GridConfig(),
    metric: str = "upp",
    jobs: int = 1,
) -> ABReport:
    """Cohort comparison of adaptive selection vs the fixed validation-best
    model: per-case Dice/HD95/failures, paired Wilcoxon and Fisher p-values."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    solver = validation_solver(grid_cfg, seed)
    _, scored = established_select(candidates, validation, solver)
    pool = checkpoint_filter(scored)
    if not pool:
        raise DataError("checkpoint filter left an empty pool")
    established_id = max(pool, key=lambda s: (s.validation_dice, -s.model_id)).model_id

    cohorts = [("internal", internal), ("shifted", shifted)]
    if not shifted:
        cohorts = [("internal", internal)]
    case_rows: list[dict] = []
    backend_failures: list[tuple[str, int, str]] = []
    p_values: dict = {}
    summary: list[dict] = []
    failure_counts: dict[str, list[int]] = {"daugs": [], "established": []}
    for cohort_name, cases in cohorts:
        tasks = [(c, pool, grid_cfg, seed, metric, established_id) for c in cases]
        results = _map_cases(_ab_case_worker, tasks, jobs)
        per_method: dict[str, list[dict]] = {"daugs": [], "established": []}
        for case_id, rows, failures in results:
            for model_id, msg in failures:
                backend_failures.append((cohort_name, case_id, f"model {model_id}: {msg}"))
            for row in rows:
                row2 = dict(row)
                row2["cohort"] = cohort_name
                case_rows.append(row2)
                per_method[row["method"]].append(row)
        d_daugs = [r["dice"] for r in per_method["daugs"] if r["dice"] is not None]
        d_estab = [r["dice"] for r in per_method["established"] if r["dice"] is not None]
        wil = paired_tests(d_daugs, d_estab)["wilcoxon_p_value"] if d_daugs and d_estab else None
        p_values[cohort_name] = {"wilcoxon_dice": wil}
        for method in ("daugs", "established"):
            rows = per_method[method]
            dvals = np.array([r["dice"] for r in rows if r["dice"] is not None], dtype=float)
            hvals = np.array([r["hd95"] for r in rows if r["hd95"] is not None], dtype=float)
            fails = sum(int(r["failed"] or 0) for r in rows)
            failure_counts[method].append(fails)
            summary.append(
                {
                    "cohort": cohort_name,
                    "method": method,
                    "n": len(rows),
                    "dice_mean": float(dvals.mean()) if dvals.size else None,
                    "dice_sd": float(dvals.std(ddof=1)) if dvals.size > 1 else None,
                    "hd95_mean": float(hvals.mean()) if hvals.size else None,
                    "hd95_sd": float(hvals.std(ddof=1)) if hvals.size > 1 else None,
                    "hd95_undefined": len(rows) - hvals.size,
                    "failures": fails,
                    "failure_rate": fails / len(rows) if rows else None,
                    "wilcoxon_p": wil,
                }
            )
    n_total = sum(len(c) for _, c in cohorts)
    k_daugs = sum(failure_counts["daugs"])
    k_estab = sum(failure_counts["established"])
    p_values["pooled"] = {
        "fisher_failures": fisher_exact(k_daugs, n_total, k_estab, n_total),
        "daugs_failures": k_daugs,
        "established_failures": k_estab,
    }

    _write_ab_outputs(out, case_rows, summary, p_values, pool, established_id, backend_failures)
    return ABReport(
        pool=pool,
        established_id=established_id,
        case_rows=case_rows,
        summary=summary,
        p_values=p_values,
    )


def _write_ab_outputs(out, case_rows, summary, p_values, pool, established_id, backend_failures):
    from .segmenters import save_pool_cfg

    with open(out / "cases.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["cohort", "case_id", "method", "model_id", "dice", "hd95",
                "failed", "n_myo", "u_pp", "u_tot"]
        w.writerow(cols)
        for r in case_rows:
            w.writerow([_fmt(r.get(c)) for c in cols])
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["cohort", "method", "n", "dice_mean", "dice_sd", "hd95_mean",
                "hd95_sd", "hd95_undefined", "failures", "failure_rate", "wilcoxon_p"]
        w.writerow(cols)
        for r in summary:
            w.writerow([_fmt(r.get(c)) for c in cols])
        pooled = p_values["pooled"]
        w.writerow([])
        w.writerow(["pooled", "fisher_failures_p", _fmt(pooled["fisher_failures"]),
                    "daugs_failures", pooled["daugs_failures"],
                    "established_failures", pooled["established_failures"],
                    "established_model", established_id, "", "", ""])
    if backend_failures:
        with open(out / "backend_failures.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cohort", "case_id", "error"])
            for row in backend_failures:
                w.writerow(row)
    save_pool_cfg(out / "pool.cfg", pool)
    cohorts = sorted({r["cohort"] for r in summary})
    groups = {}
    errs = {}
    for method in ("daugs", "established"):
        groups[method] = [
            next(r["dice_mean"] for r in summary if r["cohort"] == c and r["method"] == method)
            or 0.0
            for c in cohorts
        ]
        errs[method] = [
            next(r["dice_sd"] for r in summary if r["cohort"] == c and r["method"] == method)
            or 0.0
            for c in cohorts
        ]
    svgplot.bar_chart(
        out / "dice_by_cohort.svg", cohorts, groups,
        title="Myocardial Dice by cohort", ylabel="Dice", errors=errs,
    )
    fgroups = {
        m: [
            next(r["failure_rate"] for r in summary if r["cohort"] == c and r["method"] == m)
            or 0.0
            for c in cohorts
        ]
        for m in ("daugs", "established")
    }
    svgplot.bar_chart(
        out / "failure_rate_by_cohort.svg", cohorts, fgroups,
        title="Failed segmentation rate", ylabel="rate",
    )


# ---------------------------------------------------------------------------
# MoCo corruption sweep
# ---------------------------------------------------------------------------


def experiment_moco(
    systolic: ImageSeries,
    diastolic: ImageSeries,
    segmenter_spec: SegmenterSpec,
    out_dir: str | Path | None = None,
    f_values=(0, 1, 2, 3, 4),
    n_mc: int = 30,
    seed: int = 0,
    grid_cfg: GridConfig = GridConfig(),
) -> list[dict]:
    """Mean/sd of u_pp over Monte Carlo frame corruptions, per corruption level."""
    ctx = CaseContext(case_id=0, seed=seed)
    rows = []
    for f in f_values:
        upps = []
        for mc in range(n_mc):
            corrupted = moco_corrupt(systolic, diastolic, f, substream(seed, DOM_MOCO, f, mc))
            segmenter = make_segmenter(segmenter_spec, ctx, grid_cfg.patch, corrupted.n_frames)
            try:
                sol = solve_solution(corrupted, grid_cfg, segmenter, segmenter_spec.model_id)
            finally:
                segmenter.close()
            upps.append(sol.umap.u_pp)
        arr = np.array(upps, dtype=float)
        rows.append(
            {
                "f": f,
                "u_pp_mean": float(arr.mean()),
                "u_pp_sd": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
                "n_mc": n_mc,
            }
        )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "moco_upp.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["f", "u_pp_mean", "u_pp_sd", "n_mc"])
            for r in rows:
                w.writerow([r["f"], _fmt(r["u_pp_mean"]), _fmt(r["u_pp_sd"]), r["n_mc"]])
        svgplot.line_chart(
            out / "moco_upp.svg",
            [r["f"] for r in rows],
            {"u_pp": [r["u_pp_mean"] for r in rows]},
            errbars={"u_pp": [r["u_pp_sd"] for r in rows]},
            title="Uncertainty vs corrupted frame count",
            xlabel="corrupted frames f",
            ylabel="u_pp",
        )
    return rows


# ---------------------------------------------------------------------------
# Pool heterogeneity report
# ---------------------------------------------------------------------------


def _montage(tiles: list[np.ndarray], n_cols: int, pad: int = 2, fill=0) -> np.ndarray:
    n = len(tiles)
    n_rows = math.ceil(n / n_cols)
    th, tw = tiles[0].shape
    out = np.full(
        (n_rows * th + (n_rows + 1) * pad, n_cols * tw + (n_cols + 1) * pad),
        fill,
        dtype=tiles[0].dtype,
    )
    for i, tile in enumerate(tiles):
        r, c = divmod(i, n_cols)
        y0 = pad + r * (th + pad)
        x0 = pad + c * (tw + pad)
        out[y0 : y0 + th, x0 : x0 + tw] = tile
    return out


def pool_heterogeneity_report(
    case: Case,
    pool: list[SegmenterSpec],
    out_dir: str | Path,
    seed: int = 0,
    grid_cfg: GridConfig = GridConfig(),
    n_cols: int = 10,
) -> dict:
    """Solution-matrix montages (masks + U-maps), the u_pp histogram, and the
    chosen model, for one case across the whole pool."""
    if len(pool) < 2:
        raise DataError("pool heterogeneity report needs >= 2 members")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx = case_context(case, seed)
    ordered = sorted(pool, key=lambda s: ((s.run_id is None, s.run_id), s.model_id))
    solutions, _ = run_case(case.series, grid_cfg, ordered, ctx)
    chosen_idx, ranking = daugs_select(solutions)
    run_ids = {s.run_id for s in ordered}
    if None not in run_ids:
        n_cols = max(
            sum(1 for s in ordered if s.run_id == r) for r in run_ids
        )
    mask_tiles = [mask_to_u8(s.mask) for s in solutions]
    # chosen tile gets a bright border so it stands out in the matrix
    chosen_tile = mask_tiles[chosen_idx].copy()
    chosen_tile[:2, :] = 255
    chosen_tile[-2:, :] = 255
    chosen_tile[:, :2] = 255
    chosen_tile[:, -2:] = 255
    mask_tiles[chosen_idx] = chosen_tile
    write_pgm(out / "solutions_masks.pgm", _montage(mask_tiles, n_cols), maxval=255)
    umap_tiles = [umap_to_u16(s.umap) for s in solutions]
    write_pgm(out / "solutions_umaps.pgm", _montage(umap_tiles, n_cols), maxval=65535)
    upps = [s.umap.u_pp for s in solutions]
    svgplot.histogram(
        out / "upp_histogram.svg",
        upps,
        bins=20,
        title="u_pp across the model pool",
        xlabel="u_pp",
        highlight=solutions[chosen_idx].umap.u_pp,
    )
    with open(out / "pool_upp.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_id", "run_id", "checkpoint_id", "u_pp", "u_tot", "n_myo", "chosen"])
        for i, (spec, sol) in enumerate(zip(ordered, solutions)):
            w.writerow(
                [
                    sol.model_id,
                    "" if spec.run_id is None else spec.run_id,
                    "" if spec.checkpoint_id is None else spec.checkpoint_id,
                    _fmt(sol.umap.u_pp),
                    _fmt(sol.umap.u_tot),
                    sol.umap.n_myo,
                    int(i == chosen_idx),
                ]
            )
    n_rows = math.ceil(len(solutions) / n_cols)
    return {
        "n_rows": n_rows,
        "n_cols": n_cols,
        "chosen_model": solutions[chosen_idx].model_id,
        "u_pp": upps,
    }


# ---------------------------------------------------------------------------
# u_pp vs u_tot comparison
# ---------------------------------------------------------------------------


def metric_choice_row(case: Case, solutions: list[SegmentationSolution]) -> dict:
    """Compare what the two uncertainty metrics select on one case."""
    i_upp, _ = daugs_select(solutions, metric="upp")
    i_tot, _ = daugs_select(solutions, metric="utot")
    row = {
        "case_id": case.case_id,
        "model_upp": solutions[i_upp].model_id,
        "model_utot": solutions[i_tot].model_id,
        "disagree": int(i_upp != i_tot),
        "n_myo_upp": solutions[i_upp].umap.n_myo,
        "n_myo_utot": solutions[i_tot].umap.n_myo,
    }
    for tag, sol in (("upp", solutions[i_upp]), ("utot", solutions[i_tot])):
        if case.gt is not None:
            ev = evaluate_mask(case, sol.mask)
            row[f"dice_{tag}"] = ev["dice"]
            row[f"noncontiguous_{tag}"] = int(bool(ev["report"].noncontiguous_segments))
            row[f"failed_{tag}"] = int(ev["report"].failed)
        else:
            row[f"dice_{tag}"] = None
            row[f"noncontiguous_{tag}"] = None
            row[f"failed_{tag}"] = None
    return row


def _metric_case_worker(args):
    case, pool, grid_cfg, seed = args
    ctx = case_context(case, seed)
    solutions, _ = run_case(case.series, grid_cfg, pool, ctx)
    return metric_choice_row(case, solutions)


def metric_variant_compare(
    cohorts: dict[str, list[Case]],
    pool: list[SegmenterSpec],
    out_dir: str | Path,
    seed: int = 0,
    grid_cfg: GridConfig = GridConfig(),
    jobs: int = 1,
) -> dict:
    """Selection-metric comparison per cohort: mean Dice and noncontiguous
    counts under each metric plus the per-case disagreement list."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    all_rows: list[dict] = []
    summary = {}
    for name, cases in cohorts.items():
        tasks = [(c, pool, grid_cfg, seed) for c in cases]
        rows = _map_cases(_metric_case_worker, tasks, jobs)
        for r in rows:
            r2 = dict(r)
            r2["cohort"] = name
            all_rows.append(r2)
        summary[name] = {
            "n": len(rows),
            "dice_upp_mean": _mean_or_none([r["dice_upp"] for r in rows]),
            "dice_utot_mean": _mean_or_none([r["dice_utot"] for r in rows]),
            "noncontiguous_upp": sum(r["noncontiguous_upp"] or 0 for r in rows),
            "noncontiguous_utot": sum(r["noncontiguous_utot"] or 0 for r in rows),
            "disagreements": sum(r["disagree"] for r in rows),
        }
    cols = [
        "cohort", "case_id", "model_upp", "model_utot", "disagree",
        "dice_upp", "dice_utot", "n_myo_upp", "n_myo_utot",
        "noncontiguous_upp", "noncontiguous_utot", "failed_upp", "failed_utot",
    ]
    with open(out / "metric_compare_cases.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in all_rows:
            w.writerow([_fmt(r.get(c)) for c in cols])
    with open(out / "metric_compare_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cohort", "n", "dice_upp_mean", "dice_utot_mean",
                    "noncontiguous_upp", "noncontiguous_utot", "disagreements"])
        for name, s in summary.items():
            w.writerow([name, s["n"], _fmt(s["dice_upp_mean"]), _fmt(s["dice_utot_mean"]),
                        s["noncontiguous_upp"], s["noncontiguous_utot"], s["disagreements"]])
    return {"rows": all_rows, "summary": summary}


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None
