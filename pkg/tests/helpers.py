"""Shared test machinery: an in-memory run of the whole pipeline."""

from __future__ import annotations

import numpy as np

from freshscan import analytics as an
from freshscan import candidates as cm
from freshscan.calibration import fit_bcts
from freshscan.scan import scan_observations
from freshscan.scorer import (
    fit_logistic,
    raw_logit_matrix,
    train_holdout_split,
    window_features,
)
from freshscan.synth import SyntheticWorldConfig, generate_synthetic_archive
from freshscan.training import build_labeled_set, training_features

SIZE = 120
STRIDE = 40


def run_memory_pipeline(cfg: SyntheticWorldConfig, size: int = SIZE, stride: int = STRIDE,
                        k: int = 15, per_bin: int = 5) -> dict:
    """synth -> train -> calibrate -> scan -> cluster -> filter -> select -> report,
    entirely in memory. Returns the intermediate artifacts keyed by name."""
    seed = cfg.rng_seed
    arc = generate_synthetic_archive(cfg)
    windows = build_labeled_set(arc.observations, arc.truth, rng_seed=seed, size=size)
    train_set, holdout = train_holdout_split(windows, seed)
    x, y = training_features(train_set, seed)
    model = fit_logistic(x, y)
    hx = np.stack([window_features(lw.pixels) for lw in holdout])
    hy = np.array([lw.label for lw in holdout], dtype=np.int64)
    z = raw_logit_matrix(model, hx)
    calib = fit_bcts(scores=z, labels=hy)
    grids = scan_observations(arc.observations, model, calib, size=size, stride=stride)
    metas = [o.meta for o in arc.observations]
    cands = cm.attach_ti(cm.build_candidates(grids, metas), arc.ti_map)
    filtered = cm.apply_filters(cands)
    expected = an.expected_distribution(arc.ti_map)
    chosen_top = cm.top_k(filtered, k)
    strat_bins = cm.stratified_top(filtered, per_bin=per_bin)
    chosen_strat = [c for b in sorted(strat_bins) for c in strat_bins[b]]
    out = {
        "archive": arc,
        "model": model,
        "calibration": calib,
        "holdout_logits": z,
        "holdout_labels": hy,
        "grids": grids,
        "metas": metas,
        "candidates": cands,
        "filtered": filtered,
        "expected": expected,
        "top_k": chosen_top,
        "stratified_bins": strat_bins,
        "stratified": chosen_strat,
    }
    if chosen_top and chosen_strat:
        out["report_top_k"] = an.bias_report(
            [c.ti_value for c in chosen_top], label="top_k", expected=expected)
        out["report_stratified"] = an.bias_report(
            [c.ti_value for c in chosen_strat], label="stratified", expected=expected)
    return out
