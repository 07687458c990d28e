"""Data-adaptive (uncertainty-guided) model selection, the fixed
best-on-validation baseline, and checkpoint pool filtering."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import replace
from pathlib import Path

from .core import MYOCARDIUM, DataError, SegmentationSolution
from .segmenters import SegmenterSpec

DICE_THRESHOLD = 0.87
PER_RUN_CAP = 10


def daugs_select(
    solutions: list[SegmentationSolution], metric: str = "upp"
) -> tuple[int, list[tuple[int, float]]]:
    """Pick the solution with the lowest uncertainty metric.

    Returns (index into `solutions`, ranking of (model_id, metric value)).
    Ties break toward the lowest model_id; sentinel-valued (empty) solutions
    rank last. The choice depends only on (metric, model_id), so permuting
    the input list never changes which model wins.
    """
    if not solutions:
        raise DataError("daugs_select needs at least one solution")
    order = sorted(
        range(len(solutions)),
        key=lambda i: (solutions[i].metric(metric), solutions[i].model_id),
    )
    chosen = order[0]
    best = solutions[chosen].metric(metric)
    for i, s in enumerate(solutions):
        v = s.metric(metric)
        if math.isfinite(v) and v < best:
            raise DataError("selection postcondition violated")
    ranking = [(solutions[i].model_id, solutions[i].metric(metric)) for i in order]
    return chosen, ranking


def established_select(
    pool: list[SegmenterSpec],
    validation,
    solver=None,
) -> tuple[int, list[SegmenterSpec]]:
    """Fix one model: the highest mean myocardial Dice over the validation cases.

    `validation` is a list of harness cases carrying ground truth; `solver`
    maps (spec, case) to a predicted mask and defaults to the standard
    reconstruction pipeline. Returns (model_id, specs with validation_dice set).
    """
    if not pool:
        raise DataError("established_select needs a non-empty pool")
    if not validation:
        raise DataError("established_select needs validation cases")
    if solver is None:
        from .harness import validation_solver

        solver = validation_solver()
    from .metrics import dice

    scored = []
    for spec in pool:
        total = 0.0
        for case in validation:
            if case.gt is None:
                raise DataError("validation cases need ground truth")
            mask = solver(spec, case)
            total += dice(mask, case.gt, MYOCARDIUM)
        scored.append(replace(spec, validation_dice=total / len(validation)))
    best = max(scored, key=lambda s: (s.validation_dice, -s.model_id))
    return best.model_id, scored


def checkpoint_filter(
    candidates: list[SegmenterSpec],
    threshold: float = DICE_THRESHOLD,
    per_run_cap: int = PER_RUN_CAP,
) -> list[SegmenterSpec]:
    """Keep, per training run, up to per_run_cap members with
    validation_dice >= threshold (highest first, inclusive threshold)."""
    runs: dict[object, list[SegmenterSpec]] = {}
    for c in candidates:
        if c.validation_dice is None:
            raise DataError(f"candidate {c.model_id} has no validation_dice")
        runs.setdefault(c.run_id, []).append(c)
    kept: list[SegmenterSpec] = []
    for run_id in sorted(runs, key=lambda r: (r is None, r)):
        members = [c for c in runs[run_id] if c.validation_dice >= threshold]
        members.sort(key=lambda c: (-c.validation_dice, c.model_id))
        if not members:
            warnings.warn(f"training run {run_id!r}: no checkpoint reached Dice {threshold}")
        kept.extend(members[:per_run_cap])
    kept.sort(key=lambda c: c.model_id)
    return kept


def write_selection_report(
    path: str | Path, solutions: list[SegmentationSolution], chosen_index: int
) -> None:
    """CSV report: one row per pool member, the chosen one flagged."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_id", "u_pp", "u_tot", "n_myo", "chosen"])
        for i, s in enumerate(solutions):
            w.writerow(
                [
                    s.model_id,
                    f"{s.umap.u_pp:.10g}",
                    f"{s.umap.u_tot:.10g}",
                    s.umap.n_myo,
                    1 if i == chosen_index else 0,
                ]
            )
