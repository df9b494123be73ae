"""Window scorer: fixed hand features + logistic baseline, plus augmentation.

The baseline model is a linear stand-in for a heavyweight image classifier:
five window statistics chosen to respond to compact blast features (local
dark/bright anomaly, tail contrast, edge energy) feed a logistic fit. Raw
scores use the (0, w.x + c) two-logit form so calibration code is agnostic
to where the scores came from.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.optimize import minimize

from .calibration import NEGATIVE, POSITIVE, CalibrationModel, RawScore

FEATURE_SET_VERSION = "bwf1"
FEATURE_NAMES = ("mean", "std", "center_annulus_diff", "p5_contrast", "gradient_energy")
MODEL_SCHEMA_VERSION = 1

_L2_PENALTY = 3e-3


class ScorerError(ValueError):
    """Invalid scorer input or degenerate training data."""


@dataclass(frozen=True)
class LabeledWindow:
    pixels: np.ndarray
    label: int  # NEGATIVE or POSITIVE

    def __post_init__(self):
        if self.label not in (NEGATIVE, POSITIVE):
            raise ScorerError(f"label must be 0 or 1, got {self.label}")
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ScorerError("window pixels must be 2-D")
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class BaselineScorerModel:
    weights: tuple[float, ...]
    intercept: float
    feature_version: str = FEATURE_SET_VERSION

    def __post_init__(self):
        if self.feature_version != FEATURE_SET_VERSION:
            raise ScorerError(f"unsupported feature set {self.feature_version!r}")
        if len(self.weights) != len(FEATURE_NAMES):
            raise ScorerError(f"expected {len(FEATURE_NAMES)} weights, got {len(self.weights)}")
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    @classmethod
    def zeros(cls) -> "BaselineScorerModel":
        return cls(weights=(0.0,) * len(FEATURE_NAMES), intercept=0.0)


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

_mask_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _disc_annulus_masks(size: int) -> tuple[np.ndarray, np.ndarray]:
    if size not in _mask_cache:
        c = (size - 1) / 2.0
        yy, xx = np.ogrid[:size, :size]
        r = np.hypot(yy - c, xx - c)
        disc = r <= size / 4.0
        annulus = (r > size / 4.0) & (r <= size / 2.0)
        _mask_cache[size] = (disc, annulus)
    return _mask_cache[size]


def window_features(window: np.ndarray) -> np.ndarray:
    """Five summary statistics of one square window (any size >= 8)."""
    w = np.asarray(window, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ScorerError(f"window must be square 2-D, got shape {w.shape}")
    if w.shape[0] < 8:
        raise ScorerError("window too small for feature extraction")
    disc, annulus = _disc_annulus_masks(w.shape[0])
    mean = w.mean()
    gy, gx = np.gradient(w)
    return np.array([
        mean,
        w.std(),
        w[disc].mean() - w[annulus].mean(),
        mean - np.percentile(w, 5),
        (gx * gx + gy * gy).mean(),
    ])


def score_window(model: BaselineScorerModel, window: np.ndarray,
                 expected_size: int = 300) -> RawScore:
    """Raw two-class logits for one window; rejects the wrong shape."""
    w = np.asarray(window)
    if w.shape != (expected_size, expected_size):
        raise ScorerError(f"expected a {expected_size}x{expected_size} window, got {w.shape}")
    x = window_features(w)
    z = float(np.dot(model.weights, x) + model.intercept)
    return RawScore(z_neg=0.0, z_pos=z)


def raw_logit_matrix(model: BaselineScorerModel, features: np.ndarray) -> np.ndarray:
    """(n, 2) logits for precomputed feature rows."""
    z = features @ np.asarray(model.weights) + model.intercept
    return np.column_stack([np.zeros_like(z), z])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_baseline(train: Sequence[LabeledWindow]) -> BaselineScorerModel:
    """Logistic fit (mean NLL + small L2) over the fixed feature set.

    Features are standardized internally and the weights folded back, so the
    stored model applies directly to raw features. The objective uses the
    mean likelihood, making the fit invariant to uniform sample duplication.
    """
    if not train:
        raise ScorerError("training set is empty")
    y = np.array([lw.label for lw in train], dtype=np.float64)
    if len(set(y.tolist())) < 2:
        raise ScorerError("training set must contain both classes")
    x = np.stack([window_features(lw.pixels) for lw in train])
    return fit_logistic(x, y)


def fit_logistic(x: np.ndarray, y: np.ndarray) -> BaselineScorerModel:
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    xs = (x - mu) / sd

    def objective(params):
        w, c = params[:-1], params[-1]
        s = xs @ w + c
        f = float(np.mean(np.logaddexp(0.0, s) - y * s) + _L2_PENALTY * np.dot(w, w))
        p = 1.0 / (1.0 + np.exp(-s))
        resid = p - y
        grad_w = xs.T @ resid / len(y) + 2.0 * _L2_PENALTY * w
        grad_c = float(resid.mean())
        return f, np.append(grad_w, grad_c)

    x0 = np.zeros(x.shape[1] + 1)
    res = minimize(objective, x0, jac=True, method="L-BFGS-B",
                   options={"maxiter": 5000, "gtol": 1e-9, "ftol": 1e-14})
    w_std, c_std = res.x[:-1], float(res.x[-1])
    w_raw = w_std / sd
    c_raw = c_std - float(np.dot(w_std, mu / sd))
    return BaselineScorerModel(weights=tuple(w_raw), intercept=c_raw)


def train_holdout_split(windows: Sequence[LabeledWindow], rng_seed: int,
                        holdout_frac: float = 0.1) -> tuple[list[LabeledWindow], list[LabeledWindow]]:
    """Seeded uniform split; at least one sample lands on each side."""
    if not 0 < holdout_frac < 1:
        raise ScorerError("holdout_frac must be in (0, 1)")
    n = len(windows)
    if n < 2:
        raise ScorerError("need at least two samples to split")
    order = np.random.default_rng(rng_seed).permutation(n)
    n_hold = min(max(1, int(round(n * holdout_frac))), n - 1)
    hold_idx = set(order[:n_hold].tolist())
    train = [windows[i] for i in range(n) if i not in hold_idx]
    held = [windows[i] for i in range(n) if i in hold_idx]
    return train, held


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def augment_variants(pixels: np.ndarray, rng: np.random.Generator) -> list[np.ndarray]:
    """The six training variants of one window: original, horizontal flip,
    vertical flip, one random rotation of 90/180/270, one random intensity
    jitter (gain U(0.9, 1.1), offset U(-0.05, 0.05), clamped), and a Gaussian
    blur of radius 2. Consumes exactly three rng draws per call."""
    px = np.asarray(pixels, dtype=np.float32)
    k = int(rng.integers(1, 4))  # quarter turns: 90, 180, or 270
    gain = rng.uniform(0.9, 1.1)
    offset = rng.uniform(-0.05, 0.05)
    return [
        px,
        np.flip(px, axis=1),
        np.flip(px, axis=0),
        np.rot90(px, k),
        np.clip(px * np.float32(gain) + np.float32(offset), 0.0, 1.0),
        ndimage.gaussian_filter(px, sigma=2.0, mode="nearest"),
    ]


def augment(windows: Sequence[LabeledWindow], rng_seed: int) -> list[LabeledWindow]:
    """Exactly six labeled windows per source window (see augment_variants)."""
    if not windows:
        raise ScorerError("augment requires a nonempty input set")
    rng = np.random.default_rng(rng_seed)
    out: list[LabeledWindow] = []
    for lw in windows:
        out.extend(LabeledWindow(np.ascontiguousarray(v, dtype=np.float32), lw.label)
                   for v in augment_variants(lw.pixels, rng))
    return out


# ---------------------------------------------------------------------------
# Model bundle + labeled-set I/O
# ---------------------------------------------------------------------------

def save_model(path: Path | str, model: BaselineScorerModel,
               calibration: CalibrationModel) -> None:
    doc = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "feature_set_version": model.feature_version,
        "weights": list(model.weights),
        "intercept": model.intercept,
        "temperature": calibration.temperature,
        "bias_neg": calibration.bias_neg,
        "bias_pos": calibration.bias_pos,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_model(path: Path | str) -> tuple[BaselineScorerModel, CalibrationModel]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise ScorerError(f"{path}: unsupported model schema {doc.get('schema_version')!r}")
    model = BaselineScorerModel(
        weights=tuple(doc["weights"]),
        intercept=float(doc["intercept"]),
        feature_version=doc["feature_set_version"],
    )
    calibration = CalibrationModel(
        temperature=float(doc["temperature"]),
        bias_neg=float(doc["bias_neg"]),
        bias_pos=float(doc["bias_pos"]),
    )
    return model, calibration


_LABEL_ALIASES = {"positive": POSITIVE, "negative": NEGATIVE, "1": POSITIVE, "0": NEGATIVE}


def load_labeled_dir(labels_csv: Path | str) -> list[LabeledWindow]:
    """Windows listed in a (path,label) CSV; paths resolve relative to the CSV."""
    from .raster import read_image

    labels_csv = Path(labels_csv)
    out = []
    with labels_csv.open() as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "path":
                continue
            if len(row) < 2:
                raise ScorerError(f"{labels_csv}: malformed row {row!r}")
            rel, label_text = row[0].strip(), row[1].strip().lower()
            if label_text not in _LABEL_ALIASES:
                raise ScorerError(f"{labels_csv}: unknown label {label_text!r}")
            raw, maxval = read_image(labels_csv.parent / rel)
            out.append(LabeledWindow(raw.astype(np.float32) / np.float32(maxval),
                                     _LABEL_ALIASES[label_text]))
    if not out:
        raise ScorerError(f"{labels_csv}: no labeled windows found")
    return out
