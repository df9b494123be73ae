"""Bias-corrected temperature scaling and expected calibration error.

Calibrated posteriors are softmax(z / T + b) with one temperature T > 0 and
one free bias per class. Both biases are kept free (the softmax only sees
their difference, so the fit has a flat direction; starting from zero keeps
the iterates in the balanced subspace).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

NEGATIVE, POSITIVE = 0, 1


class CalibrationError(ValueError):
    """Invalid calibration model or degenerate fitting data."""


@dataclass(frozen=True)
class RawScore:
    """Uncalibrated two-class logits."""

    z_neg: float
    z_pos: float

    def __post_init__(self):
        if not (np.isfinite(self.z_neg) and np.isfinite(self.z_pos)):
            raise CalibrationError(f"logits must be finite, got ({self.z_neg}, {self.z_pos})")


@dataclass(frozen=True)
class CalibrationModel:
    temperature: float = 1.0
    bias_neg: float = 0.0
    bias_pos: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.temperature) or self.temperature <= 0:
            raise CalibrationError(f"temperature must be > 0, got {self.temperature}")
        if not (np.isfinite(self.bias_neg) and np.isfinite(self.bias_pos)):
            raise CalibrationError("bias terms must be finite")


IDENTITY_CALIBRATION = CalibrationModel()


def _as_logit_array(scores) -> np.ndarray:
    if isinstance(scores, np.ndarray):
        z = np.asarray(scores, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != 2:
            raise CalibrationError(f"logit array must have shape (n, 2), got {z.shape}")
        return z
    return np.array([[s.z_neg, s.z_pos] for s in scores], dtype=np.float64)


def calibrated_probs(model: CalibrationModel, z: np.ndarray) -> np.ndarray:
    """softmax(z / T + b) row-wise, numerically stable for any finite logits."""
    u = z / model.temperature + np.array([model.bias_neg, model.bias_pos])
    u = u - u.max(axis=1, keepdims=True)
    e = np.exp(u)
    return e / e.sum(axis=1, keepdims=True)


def apply_calibration(model: CalibrationModel, score: RawScore) -> tuple[float, float]:
    """Calibrated (p_neg, p_pos) for one raw score."""
    p = calibrated_probs(model, np.array([[score.z_neg, score.z_pos]]))
    return float(p[0, 0]), float(p[0, 1])


def nll(model: CalibrationModel, scores, labels: Sequence[int]) -> float:
    """Mean negative log-likelihood of the calibrated posteriors."""
    z = _as_logit_array(scores)
    y = np.asarray(labels, dtype=np.int64)
    f, _ = _nll_and_grad(np.array([model.temperature, model.bias_neg, model.bias_pos]), z, y)
    return float(f)


def _nll_and_grad(params: np.ndarray, z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean NLL and its analytic gradient with respect to (T, b_neg, b_pos)."""
    t, b0, b1 = params
    u = z / t + np.array([b0, b1])
    umax = u.max(axis=1, keepdims=True)
    log_norm = umax[:, 0] + np.log(np.exp(u - umax).sum(axis=1))
    n = z.shape[0]
    u_true = u[np.arange(n), y]
    f = float(np.mean(log_norm - u_true))

    p = np.exp(u - log_norm[:, None])
    resid = p.copy()
    resid[np.arange(n), y] -= 1.0
    grad_b = resid.mean(axis=0)
    # du/dT = -z / T^2
    grad_t = float(np.mean((resid * (-z / t**2)).sum(axis=1)))
    return f, np.array([grad_t, grad_b[0], grad_b[1]])


def fit_bcts(held_out: Sequence[tuple[RawScore, int]] | None = None,
             *,
             scores=None,
             labels: Sequence[int] | None = None,
             max_iter: int = 10_000,
             grad_tol: float = 1e-6,
             return_history: bool = False):
    """Fit (T, b_neg, b_pos) by minimizing mean NLL on a held-out set.

    Accepts either a sequence of (RawScore, label) pairs or scores=/labels=
    arrays. Starts at the identity calibration, so the fitted NLL never
    exceeds the uncalibrated NLL on the fitting set.
    """
    if held_out is not None:
        if not held_out:
            raise CalibrationError("held-out set is empty")
        scores = [s for s, _ in held_out]
        labels = [y for _, y in held_out]
    if scores is None or labels is None:
        raise CalibrationError("fit_bcts requires scored, labeled data")
    z = _as_logit_array(scores)
    y = np.asarray(labels, dtype=np.int64)
    if z.shape[0] == 0:
        raise CalibrationError("held-out set is empty")
    if z.shape[0] != y.shape[0]:
        raise CalibrationError("scores and labels length mismatch")
    classes = set(int(v) for v in y)
    if not classes <= {NEGATIVE, POSITIVE}:
        raise CalibrationError(f"labels must be 0/1, got {sorted(classes)}")
    if len(classes) < 2:
        raise CalibrationError("held-out set must contain both classes")

    x0 = np.array([1.0, 0.0, 0.0])
    history = [float(_nll_and_grad(x0, z, y)[0])]

    def record(xk):
        history.append(float(_nll_and_grad(xk, z, y)[0]))

    res = minimize(
        _nll_and_grad, x0, args=(z, y), jac=True, method="L-BFGS-B",
        bounds=[(1e-3, 1e3), (None, None), (None, None)],
        callback=record,
        options={"maxiter": max_iter, "gtol": grad_tol, "ftol": 1e-15},
    )
    model = CalibrationModel(temperature=float(res.x[0]),
                             bias_neg=float(res.x[1]), bias_pos=float(res.x[2]))
    if return_history:
        return model, history
    return model


def ece(preds: Sequence[tuple[float, int]], n_bins: int = 10) -> float:
    """Expected calibration error over equal-width confidence bins.

    preds holds (p_pos, label) pairs; confidence is the max-class probability
    and the predicted class is positive iff p_pos >= 0.5. Empty bins
    contribute nothing.
    """
    if len(preds) == 0:
        raise CalibrationError("ece requires at least one prediction")
    if n_bins < 1:
        raise CalibrationError("n_bins must be >= 1")
    p = np.array([q for q, _ in preds], dtype=np.float64)
    y = np.array([l for _, l in preds], dtype=np.int64)
    if p.min() < 0.0 or p.max() > 1.0:
        raise CalibrationError("probabilities must lie in [0, 1]")
    conf = np.maximum(p, 1.0 - p)
    pred = (p >= 0.5).astype(np.int64)
    correct = (pred == y).astype(np.float64)
    idx = np.minimum((conf * n_bins).astype(np.int64), n_bins - 1)
    total = 0.0
    n = len(preds)
    for b in range(n_bins):
        sel = idx == b
        nb = int(sel.sum())
        if nb == 0:
            continue
        total += (nb / n) * abs(correct[sel].mean() - conf[sel].mean())
    return float(total)
