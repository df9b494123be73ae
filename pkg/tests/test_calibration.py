import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from freshscan.calibration import (
    IDENTITY_CALIBRATION,
    CalibrationError,
    CalibrationModel,
    RawScore,
    _nll_and_grad,
    apply_calibration,
    calibrated_probs,
    ece,
    fit_bcts,
    nll,
)


def softmax2(z0, z1):
    m = max(z0, z1)
    e0, e1 = math.exp(z0 - m), math.exp(z1 - m)
    return e0 / (e0 + e1), e1 / (e0 + e1)


def sample_scores(rng, n, t_true=1.0, b_neg=0.0, b_pos=0.0, spread=2.0):
    """Logits plus labels drawn from the calibrated posterior itself."""
    z = rng.standard_normal((n, 2)) * spread
    truth = CalibrationModel(temperature=t_true, bias_neg=b_neg, bias_pos=b_pos)
    p = calibrated_probs(truth, z)
    labels = (rng.random(n) < p[:, 1]).astype(int)
    return z, labels


# -- apply_calibration ---------------------------------------------------------

def test_identity_calibration_is_plain_softmax():
    rng = np.random.default_rng(0)
    for z0, z1 in rng.uniform(-40, 40, size=(200, 2)):
        p = apply_calibration(IDENTITY_CALIBRATION, RawScore(z0, z1))
        expected = softmax2(z0, z1)
        assert p[0] == pytest.approx(expected[0], abs=1e-12)
        assert p[1] == pytest.approx(expected[1], abs=1e-12)


def test_paper_parameter_hand_value():
    # softmax(((0,0))/1.51 + (-0.05, 0.26)) -> p_pos = e^0.26 / (e^0.26 + e^-0.05)
    model = CalibrationModel(temperature=1.51, bias_neg=-0.05, bias_pos=0.26)
    p_neg, p_pos = apply_calibration(model, RawScore(0.0, 0.0))
    assert p_pos == pytest.approx(0.577, abs=1e-3)
    assert p_pos == pytest.approx(math.exp(0.26) / (math.exp(0.26) + math.exp(-0.05)),
                                  abs=1e-12)
    assert p_neg + p_pos == pytest.approx(1.0, abs=1e-12)


def test_softmax_shift_invariance():
    model = CalibrationModel(temperature=1.0)
    for delta in (-3.0, 0.0, 0.4, 7.5):
        a = apply_calibration(model, RawScore(5.0, 5.0 + delta))
        b = apply_calibration(model, RawScore(0.0, delta))
        assert a[1] == pytest.approx(b[1], abs=1e-12)


@settings(max_examples=300, deadline=None)
@given(st.floats(-700, 700), st.floats(-700, 700),
       st.floats(0.01, 100.0), st.floats(-5, 5), st.floats(-5, 5))
def test_calibration_outputs_normalized_for_any_finite_logits(z0, z1, t, b0, b1):
    p = apply_calibration(CalibrationModel(t, b0, b1), RawScore(z0, z1))
    assert 0.0 <= p[0] <= 1.0 and 0.0 <= p[1] <= 1.0
    assert p[0] + p[1] == pytest.approx(1.0, abs=1e-12)


def test_model_validation():
    with pytest.raises(CalibrationError):
        CalibrationModel(temperature=0.0)
    with pytest.raises(CalibrationError):
        CalibrationModel(temperature=-2.0)
    with pytest.raises(CalibrationError):
        RawScore(float("nan"), 0.0)


# -- fit_bcts --------------------------------------------------------------------

def test_fit_recovers_identity_on_calibrated_data():
    rng = np.random.default_rng(1)
    z, labels = sample_scores(rng, 10_000)
    model = fit_bcts(scores=z, labels=labels)
    assert 0.95 <= model.temperature <= 1.05
    assert abs(model.bias_neg) < 0.05
    assert abs(model.bias_pos) < 0.05


def test_fit_recovers_half_temperature_for_halved_logits():
    # labels generated by softmax(z_true); fitting on z_true/2 must find T ~ 0.5
    rng = np.random.default_rng(2)
    z_true, labels = sample_scores(rng, 10_000)
    model = fit_bcts(scores=z_true / 2.0, labels=labels)
    assert model.temperature == pytest.approx(0.5, rel=0.10)


def test_fit_never_increases_nll_on_fitting_set():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        z, labels = sample_scores(rng, 2_000, t_true=1.0)
        fitted = fit_bcts(scores=z, labels=labels)
        assert nll(fitted, z, labels) <= nll(IDENTITY_CALIBRATION, z, labels) + 1e-12


def test_fit_objective_decreases_monotonically():
    rng = np.random.default_rng(3)
    z, labels = sample_scores(rng, 3_000, t_true=2.4, b_pos=0.6)
    _, history = fit_bcts(scores=z / 2.4, labels=labels, return_history=True)
    assert len(history) >= 2
    diffs = np.diff(history)
    assert (diffs <= 1e-12).all()


def test_fit_rejects_degenerate_inputs():
    with pytest.raises(CalibrationError):
        fit_bcts([])
    with pytest.raises(CalibrationError):
        fit_bcts([(RawScore(0.0, 1.0), 1), (RawScore(0.0, 2.0), 1)])
    with pytest.raises(CalibrationError):
        fit_bcts(scores=np.zeros((3, 2)), labels=[0, 1, 2])


def test_fit_accepts_rawscore_pairs():
    rng = np.random.default_rng(4)
    z, labels = sample_scores(rng, 500)
    pairs = [(RawScore(*row), int(y)) for row, y in zip(z, labels)]
    a = fit_bcts(pairs)
    b = fit_bcts(scores=z, labels=labels)
    assert a.temperature == pytest.approx(b.temperature, rel=1e-9)


def test_analytic_gradient_matches_central_differences():
    rng = np.random.default_rng(5)
    z, labels = sample_scores(rng, 400, t_true=1.3, b_pos=0.4)
    y = np.asarray(labels)
    eps = 1e-6
    for _ in range(100):
        params = np.array([rng.uniform(0.3, 3.0), rng.uniform(-1, 1), rng.uniform(-1, 1)])
        _, grad = _nll_and_grad(params, z, y)
        for j in range(3):
            hi, lo = params.copy(), params.copy()
            hi[j] += eps
            lo[j] -= eps
            fd = (_nll_and_grad(hi, z, y)[0] - _nll_and_grad(lo, z, y)[0]) / (2 * eps)
            assert grad[j] == pytest.approx(fd, rel=1e-4, abs=1e-8)


# -- ECE ---------------------------------------------------------------------------

def test_ece_perfectly_confident_and_correct_is_zero():
    preds = [(1.0, 1)] * 6 + [(0.0, 0)] * 4
    assert ece(preds) == 0.0


def test_ece_single_bin_hand_value_zero():
    # confidence 0.7 with 7 of 10 correct: |0.7 - 0.7| = 0
    preds = [(0.7, 1)] * 7 + [(0.7, 0)] * 3
    assert ece(preds) == pytest.approx(0.0, abs=1e-12)


def test_ece_single_bin_hand_value_half():
    preds = [(1.0, 1)] * 5 + [(1.0, 0)] * 5
    assert ece(preds) == pytest.approx(0.5, abs=1e-12)


def test_ece_requires_predictions_and_valid_probs():
    with pytest.raises(CalibrationError):
        ece([])
    with pytest.raises(CalibrationError):
        ece([(1.2, 1)])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=300))
def test_ece_always_in_unit_interval(preds):
    assert 0.0 <= ece(preds) <= 1.0


def test_ece_improves_after_fitting_miscalibrated_scores():
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        z_true, labels = sample_scores(rng, 4_000, spread=2.5)
        z_over = z_true * 3.0  # overconfident scores
        fitted = fit_bcts(scores=z_over, labels=labels)
        p_raw = calibrated_probs(IDENTITY_CALIBRATION, z_over)[:, 1]
        p_fit = calibrated_probs(fitted, z_over)[:, 1]
        e_raw = ece(list(zip(p_raw.tolist(), labels)))
        e_fit = ece(list(zip(p_fit.tolist(), labels)))
        assert e_fit <= e_raw + 1e-9
