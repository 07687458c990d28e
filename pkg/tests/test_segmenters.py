import math
import sys
from pathlib import Path

import numpy as np
import pytest

from daugs.core import BLOODPOOL, MYOCARDIUM, BackendError, DataError, LabelMask, substream
from daugs.metrics import dice
from daugs.patching import PatchPrediction
from daugs.segmenters import (
    CaseContext,
    CurveMatchingSegmenter,
    SegmenterSpec,
    _zscore_rows,
    curve_match_probs,
    load_pool_cfg,
    make_segmenter,
    perturbed_pool_candidates,
    read_prototypes_csv,
    save_pool_cfg,
    segment_patch,
    validate_pool,
    write_prototypes_csv,
)
from daugs.synth import PhantomSpec, gen_phantom, phantom_prototypes

BACKENDS = Path(__file__).parent / "backends"


def phantom_case(seed=0, magnitude=0.0):
    series, gt, rv = gen_phantom(PhantomSpec(noise_sigma=0.0))
    ctx = CaseContext(case_id=0, seed=seed, gt_mask=gt, shift_magnitude=magnitude)
    return series, gt, ctx


def test_oracle_is_one_hot_truth():
    series, gt, ctx = phantom_case()
    spec = SegmenterSpec(kind="oracle", model_id=0)
    seg = make_segmenter(spec, ctx)
    vol = series.data[:, 32:96, 32:96]
    probs = seg.segment_patch(vol, (32, 32))
    labels = np.argmax(probs, axis=2)
    assert np.array_equal(labels, gt.labels[32:96, 32:96])
    assert set(np.unique(probs)) <= {0.0, 1.0}


def test_perturbed_zero_params_equals_oracle():
    series, gt, ctx = phantom_case()
    vol = series.data[:, 32:96, 32:96]
    oracle = make_segmenter(SegmenterSpec(kind="oracle", model_id=0), ctx)
    perturbed = make_segmenter(
        SegmenterSpec(kind="perturbed_oracle", model_id=1), ctx
    )
    a = oracle.segment_patch(vol, (32, 32))
    b = perturbed.segment_patch(vol, (32, 32))
    assert np.array_equal(a, b)


def test_perturbed_full_noise_flips_everything():
    series, gt, ctx = phantom_case()
    spec = SegmenterSpec(kind="perturbed_oracle", model_id=2, noise_rate=1.0)
    seg = make_segmenter(spec, ctx)
    vol = series.data[:, 0:1, 62:64]  # 1x2 pixel patch
    probs = seg.segment_patch(vol, (62, 0))
    got = np.argmax(probs, axis=2)
    truth = gt.labels[0:1, 62:64]
    assert np.all(got != truth)


def test_perturbed_deterministic_per_call():
    series, gt, ctx = phantom_case(magnitude=0.4)
    spec = SegmenterSpec(
        kind="perturbed_oracle", model_id=3, jitter_px=1.0, noise_rate=0.1, shift_sensitivity=0.8
    )
    a = make_segmenter(spec, ctx).segment_patch(series.data[:, 0:64, 0:64], (0, 0))
    b = make_segmenter(spec, ctx).segment_patch(series.data[:, 0:64, 0:64], (0, 0))
    assert np.array_equal(a, b)


def test_perturbed_dice_monotone_in_noise():
    # derived Monte Carlo oracle: patch-level Dice vs truth over 500 patches
    series, gt, ctx = phantom_case()
    rates = [0.0, 0.1, 0.2, 0.3]
    scores = []
    origins = [(x, y) for x in (0, 16, 32, 48, 64) for y in (16, 32, 48, 64)]
    for i, rate in enumerate(rates):
        total = 0.0
        count = 0
        for rep in range(25):
            ctx_rep = CaseContext(case_id=rep, seed=123, gt_mask=gt)
            spec = SegmenterSpec(kind="perturbed_oracle", model_id=10 + i, noise_rate=rate)
            seg = make_segmenter(spec, ctx_rep)
            for (x0, y0) in origins:
                vol = series.data[:, y0 : y0 + 64, x0 : x0 + 64]
                probs = seg.segment_patch(vol, (x0, y0))
                got = LabelMask(np.argmax(probs, axis=2).astype(np.uint8))
                want = LabelMask(gt.labels[y0 : y0 + 64, x0 : x0 + 64])
                total += dice(got, want, MYOCARDIUM)
                count += 1
        scores.append(total / count)
    assert scores[0] == pytest.approx(1.0)
    assert scores[0] > scores[1] > scores[2] > scores[3]


def test_perturbed_shift_sensitivity_degrades_shifted_cases():
    series, gt, _ = phantom_case()
    spec = SegmenterSpec(
        kind="perturbed_oracle", model_id=4, noise_rate=0.01, shift_sensitivity=1.0
    )
    vol = series.data[:, 32:96, 32:96]
    truth = LabelMask(gt.labels[32:96, 32:96])
    def mean_dice(magnitude):
        total = 0.0
        for rep in range(10):
            ctx = CaseContext(case_id=rep, seed=5, gt_mask=gt, shift_magnitude=magnitude)
            seg = make_segmenter(spec, ctx)
            probs = seg.segment_patch(vol, (32, 32))
            got = LabelMask(np.argmax(probs, axis=2).astype(np.uint8))
            total += dice(got, truth, MYOCARDIUM)
        return total / 10
    assert mean_dice(0.0) > mean_dice(0.35) > mean_dice(0.8)


# --- curve matching -----------------------------------------------------------


def test_curve_matching_prefers_matching_prototype():
    t = np.linspace(0, 29, 30)
    protos = np.stack(
        [
            0.05 + 0.01 * t,  # background: slow drift
            np.sin(t / 3.0) * 0.2 + 0.4,  # myocardium
            np.where(t > 6, 0.8, 0.05),  # bloodpool: step
        ]
    )
    spec = SegmenterSpec(kind="curve_matching", model_id=0, prototypes=tuple(map(tuple, protos)))
    seg = CurveMatchingSegmenter(spec)
    vol = np.tile(protos[1][:, None, None], (1, 8, 8)).astype(np.float32)
    probs = seg.segment_patch(vol, (0, 0))
    assert float(probs[:, :, MYOCARDIUM].min()) > 0.9
    # derived oracle: direct formula evaluation on the prototype set
    q = _zscore_rows(protos)
    direct = curve_match_probs(vol, q, temperature=0.2, outlier_gain=10.0)
    assert np.array_equal(probs, direct)


def test_curve_matching_identical_prototypes_uniform():
    protos = np.tile(np.sin(np.linspace(0, 3, 30)) + 2.0, (3, 1))
    spec = SegmenterSpec(kind="curve_matching", model_id=0, prototypes=tuple(map(tuple, protos)))
    seg = CurveMatchingSegmenter(spec)
    vol = substream(1, 2).random((30, 4, 4)).astype(np.float32)
    probs = seg.segment_patch(vol, (0, 0))
    assert np.allclose(probs, 1.0 / 3.0, atol=1e-6)


def test_curve_matching_equidistant_symmetry():
    t = np.linspace(0, 2 * np.pi, 30)
    a = np.sin(t)
    b = -np.sin(t)
    far = np.sin(7 * t) * 0.3 + t
    protos = np.stack([a, b, far])
    spec = SegmenterSpec(kind="curve_matching", model_id=0, prototypes=tuple(map(tuple, protos)))
    seg = CurveMatchingSegmenter(spec)
    # pixel curve orthogonal-ish to a and b equally: cos is equidistant from +-sin
    vol = np.tile(np.cos(t)[:, None, None], (1, 2, 2)).astype(np.float32)
    probs = seg.segment_patch(vol, (0, 0))
    assert probs[0, 0, 0] == pytest.approx(probs[0, 0, 1], abs=1e-6)


def test_curve_matching_zero_variance_prototype_rejected():
    protos = np.stack([np.ones(30), np.sin(np.linspace(0, 3, 30)), np.linspace(0, 1, 30)])
    spec = SegmenterSpec(kind="curve_matching", model_id=0, prototypes=tuple(map(tuple, protos)))
    with pytest.raises(DataError):
        CurveMatchingSegmenter(spec)


def test_curve_matching_on_phantom_segments_reasonably():
    base = PhantomSpec(noise_sigma=0.005)
    series, gt, _ = gen_phantom(base)
    protos = phantom_prototypes(base)
    spec = SegmenterSpec(
        kind="curve_matching", model_id=0, prototypes=tuple(map(tuple, protos))
    )
    seg = CurveMatchingSegmenter(spec)
    vol = series.data[:, 32:96, 32:96]
    probs = seg.segment_patch(vol, (32, 32))
    got = LabelMask(np.argmax(probs, axis=2).astype(np.uint8))
    want = LabelMask(gt.labels[32:96, 32:96])
    assert dice(got, want, MYOCARDIUM) > 0.85


# --- external backends ----------------------------------------------------------


def backend_cmd(name, *extra):
    return (sys.executable, str(BACKENDS / name), *extra)


def test_external_uniform_matches_inprocess_uniform():
    series, gt, ctx = phantom_case()
    spec = SegmenterSpec(
        kind="external", model_id=0, backend_cmd=backend_cmd("uniform_backend.py")
    )
    seg = make_segmenter(spec, ctx, patch=64, n_frames=30)
    try:
        probs = seg.segment_patch(series.data[:, 0:64, 0:64], (0, 0))
    finally:
        seg.close()
    assert probs.shape == (64, 64, 3)
    assert np.allclose(probs, np.float32(1.0 / 3.0))


def test_external_crash_is_typed_error():
    series, gt, ctx = phantom_case()
    spec = SegmenterSpec(
        kind="external", model_id=7, backend_cmd=backend_cmd("crashing_backend.py"), timeout_s=10.0
    )
    seg = make_segmenter(spec, ctx, patch=64, n_frames=30)
    with pytest.raises(BackendError, match="model 7"):
        seg.segment_patch(series.data[:, 0:64, 0:64], (0, 0))


def test_external_curve_backend_agrees_with_inprocess(tmp_path):
    base = PhantomSpec(noise_sigma=0.0)
    series, gt, ctx = phantom_case()
    protos = phantom_prototypes(base)
    proto_path = tmp_path / "protos.csv"
    write_prototypes_csv(proto_path, protos)
    in_spec = SegmenterSpec(
        kind="curve_matching", model_id=0, prototypes=tuple(map(tuple, protos))
    )
    ext_spec = SegmenterSpec(
        kind="external",
        model_id=1,
        backend_cmd=backend_cmd("curve_backend.py", str(proto_path)),
    )
    vol = series.data[:, 32:96, 32:96]
    a = make_segmenter(in_spec, ctx).segment_patch(vol, (32, 32))
    ext = make_segmenter(ext_spec, ctx, patch=64, n_frames=30)
    try:
        b = ext.segment_patch(vol, (32, 32))
    finally:
        ext.close()
    assert np.abs(a.astype(np.float64) - b.astype(np.float64)).max() < 1e-5
    da = np.argmax(a, axis=2)
    db = np.argmax(b, axis=2)
    assert dice(LabelMask(da.astype(np.uint8)), LabelMask(db.astype(np.uint8)), MYOCARDIUM) == 1.0


# --- specs / pools ----------------------------------------------------------------


def test_segment_patch_op_returns_prediction():
    series, gt, ctx = phantom_case()
    pred = segment_patch(
        SegmenterSpec(kind="oracle", model_id=0), series.data[:, 0:64, 0:64], ctx, (0, 0)
    )
    assert isinstance(pred, PatchPrediction)


def test_spec_validation():
    with pytest.raises(DataError):
        SegmenterSpec(kind="nope", model_id=0)
    with pytest.raises(DataError):
        SegmenterSpec(kind="perturbed_oracle", model_id=0, noise_rate=-0.1)
    with pytest.raises(DataError):
        SegmenterSpec(kind="external", model_id=0)


def test_pool_unique_ids():
    pool = [SegmenterSpec(kind="oracle", model_id=0), SegmenterSpec(kind="oracle", model_id=0)]
    with pytest.raises(DataError):
        validate_pool(pool)


def test_candidate_pool_structure():
    pool = perturbed_pool_candidates(seed=5)
    assert len(pool) == 60
    assert {s.run_id for s in pool} == set(range(5))
    again = perturbed_pool_candidates(seed=5)
    assert pool == again
    assert pool != perturbed_pool_candidates(seed=6)


def test_pool_cfg_roundtrip(tmp_path):
    protos = phantom_prototypes(PhantomSpec())
    pool = [
        SegmenterSpec(kind="perturbed_oracle", model_id=0, jitter_px=0.5, noise_rate=0.02,
                      shift_sensitivity=0.4, run_id=0, checkpoint_id=1, validation_dice=0.91),
        SegmenterSpec(kind="curve_matching", model_id=1, prototypes=tuple(map(tuple, protos))),
        SegmenterSpec(kind="external", model_id=2, backend_cmd=("node", "backend.js")),
    ]
    path = tmp_path / "pool.cfg"
    save_pool_cfg(path, pool)
    back = load_pool_cfg(path)
    assert [s.model_id for s in back] == [0, 1, 2]
    assert back[0].jitter_px == pytest.approx(0.5)
    assert back[0].validation_dice == pytest.approx(0.91)
    assert np.allclose(np.asarray(back[1].prototypes), protos)
    assert back[2].backend_cmd == ("node", "backend.js")


def test_prototypes_csv_roundtrip(tmp_path):
    protos = phantom_prototypes(PhantomSpec())
    p = tmp_path / "p.csv"
    write_prototypes_csv(p, protos)
    back = read_prototypes_csv(p)
    assert np.allclose(back, protos, atol=1e-9)
