"""Shared fixture builders for unit and acceptance tests."""

import numpy as np

from daugs.core import BLOODPOOL, MYOCARDIUM, LabelMask, SegmentationSolution
from daugs.patching import binarize_smap, combine_mean, compute_umap, make_grid


def build_solution(model_id, grid, pred_fn):
    """Assemble a SegmentationSolution from a per-origin prediction function
    via the real recombination pipeline."""
    preds = [pred_fn(x0, y0) for (x0, y0) in grid.origins]
    mean = combine_mean(preds, grid)
    mask = binarize_smap(mean)
    umap = compute_umap(preds, grid, mask)
    return SegmentationSolution(model_id=model_id, mean_probs=mean, mask=mask, umap=umap)


def s5_solutions():
    """Two crafted solutions exhibiting the u_tot vs u_pp disagreement:

    - model 0: almost no myocardium (two fragments in one sector) and a single
      flaky pixel, so its U-map has the smallest total energy but few pixels
      to normalize by;
    - model 1: a full contiguous ring with several flaky boundary pixels, so
      its total energy is larger but its per-pixel energy far smaller.

    Returns (tiny_solution, ring_solution, ground truth, rv_centroid).
    """
    size, patch, stride = 16, 8, 4
    grid = make_grid(size, size, patch, stride)
    yy, xx = np.mgrid[0:size, 0:size]
    rr = np.hypot(xx - 8, yy - 8)
    ring = (rr >= 3) & (rr < 6)
    cavity = rr < 3

    def flaky(probs, x0, y0, px, py, phase):
        if x0 <= px < x0 + patch and y0 <= py < y0 + patch:
            on = ((x0 + y0) // stride + phase) % 2 == 0
            probs[py - y0, px - x0] = (0.0, 1.0, 0.0) if on else (1.0, 0.0, 0.0)

    # both myocardial fragments sit west of the cavity center: same sector
    fragments = ((1, 8), (2, 8), (1, 9), (2, 9), (5, 8), (6, 8), (5, 9), (6, 9))

    def tiny_pred(x0, y0):
        probs = np.zeros((patch, patch, 3), np.float32)
        sub_cav = cavity[y0 : y0 + patch, x0 : x0 + patch]
        probs[:, :, BLOODPOOL] = sub_cav
        probs[:, :, 0] = ~sub_cav
        for (px, py) in fragments:
            if x0 <= px < x0 + patch and y0 <= py < y0 + patch:
                probs[py - y0, px - x0] = (0.0, 1.0, 0.0)
        flaky(probs, x0, y0, 10, 10, 0)
        return probs

    def ring_pred(x0, y0):
        probs = np.zeros((patch, patch, 3), np.float32)
        sub_ring = ring[y0 : y0 + patch, x0 : x0 + patch]
        sub_cav = cavity[y0 : y0 + patch, x0 : x0 + patch]
        probs[:, :, MYOCARDIUM] = sub_ring
        probs[:, :, BLOODPOOL] = sub_cav
        probs[:, :, 0] = ~(sub_ring | sub_cav)
        for k, (px, py) in enumerate(((5, 8), (11, 8), (8, 5), (8, 11), (5, 5), (11, 11))):
            flaky(probs, x0, y0, px, py, k)
        return probs

    tiny = build_solution(0, grid, tiny_pred)
    full = build_solution(1, grid, ring_pred)
    gt = np.zeros((size, size), np.uint8)
    gt[ring] = MYOCARDIUM
    gt[cavity] = BLOODPOOL
    return tiny, full, LabelMask(gt), (1.0, 8.0)
