"""Turn an archive plus ground-truth impact list into labeled scorer windows.

Positives are windows centered on a (seeded) subset of known impacts, taken
from observations acquired after the impact time. Negatives are uniform
random windows rejected when they contain any impact center at any epoch,
so a pre-impact scene of an impact site never leaks into the negative class.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .raster import Observation
from .scorer import NEGATIVE, POSITIVE, LabeledWindow, ScorerError
from .synth import ImpactTruth


def impact_pixel(obs: Observation, impact: ImpactTruth) -> tuple[int, int] | None:
    """Integer pixel of the impact center inside an observation, or None."""
    row_f, col_f = obs.geo.geo_to_pixel(impact.lat, impact.lon)
    row, col = int(round(row_f)), int(round(col_f))
    if 0 <= row < obs.height and 0 <= col < obs.width:
        return row, col
    return None


def _centered_offsets(row: int, col: int, size: int, height: int, width: int) -> tuple[int, int]:
    r = min(max(row - size // 2, 0), height - size)
    c = min(max(col - size // 2, 0), width - size)
    return r, c


def build_labeled_set(observations: Sequence[Observation], impacts: Sequence[ImpactTruth],
                      rng_seed: int, size: int = 300,
                      positive_fraction: float = 0.6,
                      negatives_per_positive: float = 3.5,
                      windows_per_impact: int = 3,
                      center_jitter_px: int | None = None) -> list[LabeledWindow]:
    """Labeled windows for baseline training.

    positive_fraction controls which impacts contribute training positives
    (the rest stay unseen, mimicking discovery of uncatalogued impacts).
    Positive windows are jittered around the impact center by up to
    center_jitter_px (default size//8) so training matches the off-center
    placements a strided scan produces.
    """
    obs_sorted = sorted(observations, key=lambda o: o.id)
    if not obs_sorted:
        raise ScorerError("no observations supplied")
    eligible = [o for o in obs_sorted if o.height >= size and o.width >= size]
    if not eligible:
        raise ScorerError(f"no observation can host a {size}x{size} window")
    rng = np.random.default_rng(rng_seed)
    jitter = size // 8 if center_jitter_px is None else center_jitter_px

    windows: list[LabeledWindow] = []
    n_impacts = len(impacts)
    chosen = set()
    if n_impacts:
        n_train = max(1, int(round(n_impacts * positive_fraction)))
        chosen = set(rng.permutation(n_impacts)[:n_train].tolist())
    for idx in sorted(chosen):
        imp = impacts[idx]
        hosts = []
        for obs in eligible:
            if obs.acquired_at <= imp.time:
                continue
            px = impact_pixel(obs, imp)
            if px is not None:
                hosts.append((obs, px))
        for obs, (row, col) in hosts[:windows_per_impact]:
            if jitter > 0:
                row += int(rng.integers(-jitter, jitter + 1))
                col += int(rng.integers(-jitter, jitter + 1))
            r, c = _centered_offsets(row, col, size, obs.height, obs.width)
            # views into the observation buffer, not copies: training sets at
            # full window size would otherwise dominate memory
            windows.append(LabeledWindow(obs.pixels[r:r + size, c:c + size], POSITIVE))

    n_pos = len(windows)
    if n_pos == 0:
        raise ScorerError("ground truth produced no positive windows")

    target_neg = max(1, int(round(n_pos * negatives_per_positive)))
    # Precompute impact pixels per observation to keep rejection cheap.
    impact_px = {
        obs.id: [p for imp in impacts if (p := impact_pixel(obs, imp)) is not None]
        for obs in eligible
    }
    negatives = 0
    attempts = 0
    while negatives < target_neg and attempts < 80 * target_neg:
        attempts += 1
        obs = eligible[int(rng.integers(len(eligible)))]
        r = int(rng.integers(0, obs.height - size + 1))
        c = int(rng.integers(0, obs.width - size + 1))
        if any(r <= ir < r + size and c <= ic < c + size for ir, ic in impact_px[obs.id]):
            continue
        windows.append(LabeledWindow(obs.pixels[r:r + size, c:c + size], NEGATIVE))
        negatives += 1
    if negatives == 0:
        raise ScorerError("could not sample any impact-free negative windows")
    return windows


def training_features(windows: Sequence[LabeledWindow], rng_seed: int,
                      augmented: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Feature matrix and labels, with the 6-variant augmentation computed
    one window at a time so full-size pixel variants are never all resident."""
    from .scorer import augment_variants, window_features

    rng = np.random.default_rng(rng_seed)
    rows, labels = [], []
    for lw in windows:
        variants = augment_variants(lw.pixels, rng) if augmented else [lw.pixels]
        for v in variants:
            rows.append(window_features(v))
            labels.append(lw.label)
    return np.stack(rows), np.array(labels, dtype=np.float64)
