"""Command-line entry point: cohort generation, preprocessing, pool runs,
selection, evaluation, MBF quantification, and the bundled experiments.

Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error. Every
run echoes its effective configuration and a machine-readable summary.csv
into the output directory.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
from pathlib import Path

import numpy as np

from .core import (
    BackendError,
    DataError,
    EngineError,
    ImageSeries,
    UsageError,
    read_fpt,
    read_mask_fpt,
    write_fpt,
)

GLOBAL_DEFAULTS = {
    "seed": 0,
    "jobs": 1,
    "out": "out",
    "umap_stride": 2,
    "recon_stride": 32,
    "patch": 64,
    "metric": "upp",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_global_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file; flags override it")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--umap-stride", type=int, default=None, dest="umap_stride")
    p.add_argument("--recon-stride", type=int, default=None, dest="recon_stride")
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--metric", choices=("upp", "utot"), default=None)
    p.add_argument(
        "--backend",
        action="append",
        default=None,
        help="external model command line (repeatable, one per model)",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="daugs", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a phantom cohort + manifest")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--regime", choices=("none", "shifted"), default="none")
    p.add_argument("--name", default="cohort")
    _add_global_flags(p)

    p = sub.add_parser("preprocess", help="raw series -> canonical 128x128x30 in [0,1]")
    p.add_argument("--input", required=True, help="FPT series tensor")
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--spacing", type=float, nargs=2, default=(1.0, 1.0))
    p.add_argument("--center", type=int, nargs=2, default=None)
    p.add_argument("--output", default="preprocessed.fpt")
    _add_global_flags(p)

    p = sub.add_parser("run", help="run a model pool over a cohort manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pool", help="pool.cfg listing the pool members")
    _add_global_flags(p)

    p = sub.add_parser("select", help="re-select from a stored solutions report")
    p.add_argument("--report", required=True, help="CSV with model_id,u_pp,u_tot,n_myo")
    _add_global_flags(p)

    p = sub.add_parser("eval", help="metrics for stored masks against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--run", required=True, help="output directory of `daugs run`")
    _add_global_flags(p)

    p = sub.add_parser("mbf", help="segment-wise MBF for chosen masks vs manual")
    p.add_argument("--manifest", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--lut", default=None, help="signal->concentration CSV")
    _add_global_flags(p)

    p = sub.add_parser("mocosim", help="uncertainty vs frame-swap corruption level")
    p.add_argument("--n-mc", type=int, default=30, dest="n_mc")
    p.add_argument("--f-max", type=int, default=4, dest="f_max")
    _add_global_flags(p)

    p = sub.add_parser("abtest", help="adaptive vs established comparison experiment")
    p.add_argument("--n-internal", type=int, default=20, dest="n_internal")
    p.add_argument("--n-shifted", type=int, default=40, dest="n_shifted")
    p.add_argument("--n-validation", type=int, default=8, dest="n_validation")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--per-run", type=int, default=12, dest="per_run")
    _add_global_flags(p)

    p = sub.add_parser("poolreport", help="solution-matrix montage + u_pp histogram")
    p.add_argument("--manifest", required=True)
    p.add_argument("--case", type=int, default=0)
    p.add_argument("--pool", help="pool.cfg; default: seeded perturbed-oracle pool")
    _add_global_flags(p)

    p = sub.add_parser("metriccompare", help="u_pp vs u_tot selection comparison")
    p.add_argument("--manifest", action="append", required=True,
                   help="cohort manifest (repeatable)")
    p.add_argument("--pool", help="pool.cfg; default: seeded perturbed-oracle pool")
    _add_global_flags(p)

    return parser


def effective_config(args) -> dict:
    """defaults < config-file [engine] section < explicit flags."""
    cfg = dict(GLOBAL_DEFAULTS)
    if getattr(args, "config", None):
        ini = configparser.ConfigParser()
        if not ini.read(args.config):
            raise DataError(f"cannot read config file {args.config}")
        if ini.has_section("engine"):
            for key in GLOBAL_DEFAULTS:
                if ini.has_option("engine", key):
                    raw = ini.get("engine", key)
                    cfg[key] = raw if key in ("out", "metric") else type(GLOBAL_DEFAULTS[key])(raw)
    for key in GLOBAL_DEFAULTS:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if cfg["metric"] not in ("upp", "utot"):
        raise UsageError(f"unknown metric {cfg['metric']!r}")
    return cfg


def _echo_config(out: Path, cfg: dict, command: str) -> None:
    ini = configparser.ConfigParser()
    ini["engine"] = {k: str(cfg[k]) for k in sorted(cfg)}
    ini["invocation"] = {"command": command}
    with open(out / "config_used.cfg", "w") as fh:
        ini.write(fh)


def _write_summary(out: Path, rows: list[tuple[str, object]]) -> None:
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        for k, v in rows:
            w.writerow([k, v])


def _grid(cfg) -> "GridConfig":
    from .harness import GridConfig

    return GridConfig(
        patch=cfg["patch"],
        recon_stride=cfg["recon_stride"],
        umap_stride=cfg["umap_stride"],
    )


def _load_pool(args, cfg):
    from .segmenters import SegmenterSpec, load_pool_cfg, validate_pool

    if getattr(args, "pool", None):
        pool = load_pool_cfg(args.pool)
    else:
        pool = []
    for i, cmd in enumerate(getattr(args, "backend", None) or []):
        next_id = max((s.model_id for s in pool), default=-1) + 1
        pool.append(
            SegmenterSpec(kind="external", model_id=next_id, backend_cmd=tuple(cmd.split()))
        )
    validate_pool(pool)
    return pool


# --- subcommand implementations ------------------------------------------------


def cmd_phantom(args, cfg, out: Path) -> list[tuple[str, object]]:
    from .synth import gen_cohort

    manifest = gen_cohort(args.n, out, regime=args.regime, seed=cfg["seed"], name=args.name)
    return [("cases", args.n), ("regime", args.regime), ("manifest", manifest.name)]


def cmd_preprocess(args, cfg, out: Path) -> list[tuple[str, object]]:
    from .preprocess import preprocess_pipeline

    data = read_fpt(args.input)
    if data.ndim != 3:
        raise DataError("preprocess expects a 3-D (t, y, x) tensor")
    times = np.arange(data.shape[0], dtype=np.float64) * args.dt
    series = ImageSeries(data, tuple(args.spacing), times)
    result = preprocess_pipeline(series, center=tuple(args.center) if args.center else None)
    write_fpt(out / args.output, result.data)
    return [
        ("input", args.input),
        ("output", args.output),
        ("shape", "x".join(map(str, result.data.shape))),
    ]


def cmd_run(args, cfg, out: Path) -> list[tuple[str, object]]:
    from .harness import case_context, load_cohort, run_case
    from .patching import export_umap_fpt, export_umap_pgm
    from .selection import daugs_select, write_selection_report

    pool = _load_pool(args, cfg)
    if not pool:
        raise UsageError("run needs --pool and/or --backend")
    cases = load_cohort(args.manifest)
    grid_cfg = _grid(cfg)
    rows: list[tuple[str, object]] = [("cases", len(cases)), ("pool", len(pool))]
    n_failures = 0
    for case in cases:
        solutions, failures = run_case(
            case.series, grid_cfg, pool, case_context(case, cfg["seed"])
        )
        n_failures += len(failures)
        idx, _ = daugs_select(solutions, metric=cfg["metric"])
        tag = f"case{case.case_id:03d}"
        write_selection_report(out / f"{tag}_solutions.csv", solutions, idx)
        chosen = solutions[idx]
        write_fpt(out / f"{tag}_chosen_mask.fpt", chosen.mask.labels)
        export_umap_fpt(out / f"{tag}_chosen_umap.fpt", chosen.umap)
        export_umap_pgm(out / f"{tag}_chosen_umap.pgm", chosen.umap)
        rows.append((f"{tag}_chosen_model", chosen.model_id))
        rows.append((f"{tag}_u_pp", f"{chosen.umap.u_pp:.10g}"))
    rows.append(("backend_failures", n_failures))
    return rows


def cmd_select(args, cfg, out: Path) -> list[tuple[str, object]]:
    with open(args.report, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError("empty solutions report")
    metric_key = "u_pp" if cfg["metric"] == "upp" else "u_tot"
    ranked = sorted(rows, key=lambda r: (float(r[metric_key]), int(r["model_id"])))
    chosen = ranked[0]
    with open(out / "chosen.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "model_id", "u_pp", "u_tot", "n_myo"])
        w.writerow([cfg["metric"], chosen["model_id"], chosen["u_pp"],
                    chosen["u_tot"], chosen["n_myo"]])
    return [("metric", cfg["metric"]), ("chosen_model", chosen["model_id"])]


def cmd_eval(args, cfg, out: Path) -> list[tuple[str, object]]:
    from .harness import evaluate_mask, load_cohort

    cases = load_cohort(args.manifest)
    run_dir = Path(args.run)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["case_id", "dice_myo", "dice_bp", "hd95_mm", "failed",
             "noncontiguous_segments", "bloodpool_inclusion"]
        )
        n_failed = 0
        for case in cases:
            mask_path = run_dir / f"case{case.case_id:03d}_chosen_mask.fpt"
            if not mask_path.exists():
                raise DataError(f"missing mask {mask_path}")
            mask = read_mask_fpt(mask_path)
            ev = evaluate_mask(case, mask)
            from .core import BLOODPOOL
            from .metrics import dice as dice_fn

            rep = ev["report"]
            n_failed += int(rep.failed)
            w.writerow(
                [
                    case.case_id,
                    f"{ev['dice']:.10g}",
                    f"{dice_fn(mask, case.gt, BLOODPOOL):.10g}",
                    "NA" if ev["hd95"] is None else f"{ev['hd95']:.10g}",
                    int(rep.failed),
                    ";".join(map(str, rep.noncontiguous_segments)),
                    int(rep.bloodpool_inclusion),
                ]
            )
    return [("cases", len(cases)), ("failed", n_failed)]


def cmd_mbf(args, cfg, out: Path) -> list[tuple[str, object]]:
    from .harness import load_cohort
    from .perfusion import load_lut, mbf_table

    signal_map = load_lut(args.lut) if args.lut else None
    cases = load_cohort(args.manifest)
    run_dir = Path(args.run)
    n_done = 0
    for case in cases:
        mask_path = run_dir / f"case{case.case_id:03d}_chosen_mask.fpt"
        if not mask_path.exists():
            continue
        mask = read_mask_fpt(mask_path)
        mbf_table(
            case.series,
            {"daugs": mask},
            case.gt,
            case.rv_centroid,
            out_dir=out,
            case_id=case.case_id,
            signal_map=signal_map,
        )
        n_done += 1
    if n_done == 0:
        raise DataError("no chosen masks found in the run directory")
    return [("cases", n_done)]


def cmd_mocosim(args, cfg, out: Path) -> list[tuple[str, object]]:
    from .harness import experiment_moco
    from .segmenters import SegmenterSpec
    from .synth import moco_phantom_pair, phantom_prototypes

    systolic, diastolic, sys_spec = moco_phantom_pair(seed=cfg["seed"])
    protos = phantom_prototypes(sys_spec)
    spec = SegmenterSpec(
        kind="curve_matching", model_id=0, prototypes=tuple(map(tuple, protos))
    )
    rows = experiment_moco(
        systolic,
        diastolic,
        spec,
        out_dir=out,
        f_values=tuple(range(args.f_max + 1)),
        n_mc=args.n_mc,
        seed=cfg["seed"],
        grid_cfg=_grid(cfg),
    )
    return [("f_levels", len(rows)), ("n_mc", args.n_mc)] + [
        (f"u_pp_f{r['f']}", f"{r['u_pp_mean']:.10g}") for r in rows
    ]


def cmd_abtest(args, cfg, out: Path) -> list[tuple[str, object]]:
    from .harness import experiment_ab, load_cohort
    from .segmenters import perturbed_pool_candidates
    from .synth import gen_cohort

    seed = cfg["seed"]
    cohorts = out / "cohorts"
    internal = load_cohort(
        gen_cohort(args.n_internal, cohorts, regime="none", seed=seed, name="internal")
    )
    shifted = load_cohort(
        gen_cohort(args.n_shifted, cohorts, regime="shifted", seed=seed + 1, name="shifted")
    )
    validation = load_cohort(
        gen_cohort(args.n_validation, cohorts, regime="none", seed=seed + 2, name="validation")
    )
    candidates = perturbed_pool_candidates(seed, n_runs=args.runs, per_run=args.per_run)
    report = experiment_ab(
        internal,
        shifted,
        candidates,
        validation,
        out_dir=out,
        seed=seed,
        grid_cfg=_grid(cfg),
        metric=cfg["metric"],
        jobs=cfg["jobs"],
    )
    return None  # experiment_ab owns summary.csv


def _default_pool(cfg):
    from dataclasses import replace

    from .segmenters import perturbed_pool_candidates

    return [replace(s) for s in perturbed_pool_candidates(cfg["seed"], n_runs=5, per_run=10)]


def cmd_poolreport(args, cfg, out: Path) -> list[tuple[str, object]]:
    from .harness import load_cohort, pool_heterogeneity_report

    cases = load_cohort(args.manifest)
    matching = [c for c in cases if c.case_id == args.case]
    if not matching:
        raise DataError(f"case {args.case} not in manifest")
    pool = _load_pool(args, cfg) or _default_pool(cfg)
    info = pool_heterogeneity_report(
        matching[0], pool, out, seed=cfg["seed"], grid_cfg=_grid(cfg)
    )
    return [
        ("case", args.case),
        ("rows", info["n_rows"]),
        ("cols", info["n_cols"]),
        ("chosen_model", info["chosen_model"]),
    ]


def cmd_metriccompare(args, cfg, out: Path) -> list[tuple[str, object]]:
    from .harness import load_cohort, metric_variant_compare

    cohorts = {Path(m).stem: load_cohort(m) for m in args.manifest}
    pool = _load_pool(args, cfg) or _default_pool(cfg)
    result = metric_variant_compare(
        cohorts, pool, out, seed=cfg["seed"], grid_cfg=_grid(cfg), jobs=cfg["jobs"]
    )
    rows = []
    for name, s in result["summary"].items():
        rows.append((f"{name}_disagreements", s["disagreements"]))
        rows.append((f"{name}_noncontiguous_upp", s["noncontiguous_upp"]))
        rows.append((f"{name}_noncontiguous_utot", s["noncontiguous_utot"]))
    return rows


COMMANDS = {
    "phantom": cmd_phantom,
    "preprocess": cmd_preprocess,
    "run": cmd_run,
    "select": cmd_select,
    "eval": cmd_eval,
    "mbf": cmd_mbf,
    "mocosim": cmd_mocosim,
    "abtest": cmd_abtest,
    "poolreport": cmd_poolreport,
    "metriccompare": cmd_metriccompare,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = effective_config(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        _echo_config(out, cfg, args.command)
        rows = COMMANDS[args.command](args, cfg, out)
        if rows is not None:
            _write_summary(out, [("command", args.command), ("status", "ok")] + rows)
        return 0
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except BackendError as e:
        print(f"backend error: {e}", file=sys.stderr)
        return 3
    except EngineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
