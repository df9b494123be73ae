import numpy as np
import pytest

from freshscan.calibration import calibrated_probs
from freshscan.scorer import (
    NEGATIVE,
    POSITIVE,
    BaselineScorerModel,
    LabeledWindow,
    ScorerError,
    augment,
    fit_logistic,
    load_labeled_dir,
    load_model,
    raw_logit_matrix,
    save_model,
    score_window,
    train_baseline,
    train_holdout_split,
    window_features,
)
from freshscan.training import build_labeled_set, impact_pixel


# -- features ----------------------------------------------------------------

def test_features_of_constant_window():
    f = window_features(np.full((64, 64), 0.25))
    mean, std, disc_diff, p5c, grad = f
    assert mean == pytest.approx(0.25)
    assert std == 0.0
    assert disc_diff == pytest.approx(0.0, abs=1e-15)
    assert p5c == pytest.approx(0.0, abs=1e-15)
    assert grad == 0.0


def test_features_respond_to_central_dark_blob():
    rng = np.random.default_rng(0)
    bg = np.clip(0.6 + 0.01 * rng.standard_normal((64, 64)), 0, 1)
    blob = bg.copy()
    yy, xx = np.ogrid[:64, :64]
    blob[(yy - 31.5) ** 2 + (xx - 31.5) ** 2 < 8**2] -= 0.3
    fb, fw = window_features(bg), window_features(blob)
    assert fw[2] < fb[2]          # disc mean drops vs annulus
    assert fw[3] > fb[3]          # dark 5th-percentile tail grows
    assert fw[4] > fb[4]          # edges add gradient energy


def test_features_reject_non_square():
    with pytest.raises(ScorerError):
        window_features(np.zeros((10, 20)))


# -- scoring interface ---------------------------------------------------------

def test_zero_model_scores_all_windows_at_origin():
    model = BaselineScorerModel.zeros()
    s = score_window(model, np.random.default_rng(1).random((300, 300)))
    assert (s.z_neg, s.z_pos) == (0.0, 0.0)


def test_score_window_is_deterministic():
    model = BaselineScorerModel(weights=(0.5, -1.0, 2.0, 3.0, -4.0), intercept=0.1)
    w = np.random.default_rng(2).random((300, 300))
    assert score_window(model, w) == score_window(model, w)


def test_score_window_rejects_wrong_shape():
    model = BaselineScorerModel.zeros()
    with pytest.raises(ScorerError):
        score_window(model, np.zeros((299, 300)))
    with pytest.raises(ScorerError):
        score_window(model, np.zeros((120, 120)))  # default expects 300
    score_window(model, np.zeros((120, 120)), expected_size=120)


# -- training -----------------------------------------------------------------

def dark_blob_window(rng, size=48, depth=0.35):
    w = np.clip(0.65 + 0.01 * rng.standard_normal((size, size)), 0, 1)
    yy, xx = np.ogrid[:size, :size]
    c = (size - 1) / 2
    w[(yy - c) ** 2 + (xx - c) ** 2 < (size // 6) ** 2] -= depth
    return np.clip(w, 0, 1)


def flat_window(rng, size=48):
    return np.clip(0.65 + 0.01 * rng.standard_normal((size, size)), 0, 1)


def test_separable_training_reaches_99_percent():
    rng = np.random.default_rng(7)
    windows = [LabeledWindow(dark_blob_window(rng), POSITIVE) for _ in range(120)]
    windows += [LabeledWindow(flat_window(rng), NEGATIVE) for _ in range(120)]
    model = train_baseline(windows)
    x = np.stack([window_features(w.pixels) for w in windows])
    y = np.array([w.label for w in windows])
    acc = (((x @ np.array(model.weights) + model.intercept) > 0).astype(int) == y).mean()
    assert acc >= 0.99


def test_shuffled_labels_score_at_chance():
    # permutation oracle: with random labels, held-out accuracy sits in the
    # chance band for balanced sets
    accs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((200, 5))
        y = rng.integers(0, 2, size=200).astype(np.float64)
        model = fit_logistic(x[:150], y[:150])
        pred = (x[150:] @ np.array(model.weights) + model.intercept) > 0
        accs.append((pred.astype(float) == y[150:]).mean())
    assert np.mean(accs) <= 0.55


def test_duplicated_training_set_gives_same_model():
    rng = np.random.default_rng(5)
    windows = [LabeledWindow(dark_blob_window(rng), POSITIVE) for _ in range(40)]
    windows += [LabeledWindow(flat_window(rng), NEGATIVE) for _ in range(40)]
    m1 = train_baseline(windows)
    m2 = train_baseline(windows + windows)
    assert np.allclose(m1.weights, m2.weights, atol=1e-6)
    assert m1.intercept == pytest.approx(m2.intercept, abs=1e-6)


def test_single_class_training_rejected():
    rng = np.random.default_rng(6)
    with pytest.raises(ScorerError):
        train_baseline([LabeledWindow(flat_window(rng), NEGATIVE) for _ in range(10)])


def test_train_holdout_split_is_seeded_and_exhaustive():
    rng = np.random.default_rng(8)
    windows = [LabeledWindow(flat_window(rng, 16), NEGATIVE) for _ in range(50)]
    t1, h1 = train_holdout_split(windows, 123)
    t2, h2 = train_holdout_split(windows, 123)
    assert len(h1) == 5 and len(t1) == 45
    assert [id(w) for w in t1] == [id(w) for w in t2]
    assert [id(w) for w in h1] == [id(w) for w in h2]
    t3, _ = train_holdout_split(windows, 124)
    assert [id(w) for w in t3] != [id(w) for w in t1]


# -- augmentation ---------------------------------------------------------------

def test_augment_is_exactly_six_per_input_and_preserves_balance():
    rng = np.random.default_rng(9)
    windows = [LabeledWindow(flat_window(rng, 32), POSITIVE) for _ in range(30)]
    windows += [LabeledWindow(flat_window(rng, 32), NEGATIVE) for _ in range(70)]
    out = augment(windows, rng_seed=1)
    assert len(out) == 6 * len(windows)
    assert sum(1 for w in out if w.label == POSITIVE) == 6 * 30
    assert sum(1 for w in out if w.label == NEGATIVE) == 6 * 70


def test_augment_single_window():
    rng = np.random.default_rng(10)
    out = augment([LabeledWindow(flat_window(rng, 32), POSITIVE)], rng_seed=2)
    assert len(out) == 6
    assert all(w.label == POSITIVE for w in out)


def test_augment_constant_window_symmetry():
    const = LabeledWindow(np.full((32, 32), 0.4, dtype=np.float32), NEGATIVE)
    out = augment([const], rng_seed=3)
    # flips and rotations of a constant image are pixel-identical to it
    for variant in out[:4]:
        assert np.array_equal(variant.pixels, const.pixels)


def test_augment_is_seeded():
    rng = np.random.default_rng(11)
    windows = [LabeledWindow(flat_window(rng, 32), POSITIVE) for _ in range(5)]
    a = augment(windows, rng_seed=42)
    b = augment(windows, rng_seed=42)
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))


def test_augment_empty_rejected():
    with pytest.raises(ScorerError):
        augment([], rng_seed=0)


# -- persistence -----------------------------------------------------------------

def test_model_bundle_roundtrip(tmp_path):
    from freshscan.calibration import CalibrationModel

    model = BaselineScorerModel(weights=(1.0, -2.0, 3.5, 0.0, 1e-3), intercept=-0.7)
    calib = CalibrationModel(temperature=1.51, bias_neg=-0.05, bias_pos=0.26)
    save_model(tmp_path / "m.json", model, calib)
    m2, c2 = load_model(tmp_path / "m.json")
    assert m2 == model
    assert c2 == calib


def test_load_labeled_dir(tmp_path):
    from freshscan.raster import write_pgm

    rng = np.random.default_rng(12)
    for i, label in enumerate(["positive", "negative", "1", "0"]):
        write_pgm(tmp_path / f"w{i}.pgm", rng.integers(0, 256, size=(8, 8)).astype(np.uint8))
    (tmp_path / "labels.csv").write_text(
        "path,label\nw0.pgm,positive\nw1.pgm,negative\nw2.pgm,1\nw3.pgm,0\n")
    windows = load_labeled_dir(tmp_path / "labels.csv")
    assert [w.label for w in windows] == [1, 0, 1, 0]
    assert windows[0].pixels.max() <= 1.0


def test_load_labeled_dir_unknown_label(tmp_path):
    from freshscan.raster import write_pgm

    write_pgm(tmp_path / "w.pgm", np.zeros((4, 4), dtype=np.uint8))
    (tmp_path / "labels.csv").write_text("w.pgm,maybe\n")
    with pytest.raises(ScorerError):
        load_labeled_dir(tmp_path / "labels.csv")


# -- synthetic pair oracle ---------------------------------------------------------

def test_trained_scorer_ranks_impacts_above_matched_background(pipe7):
    """p_pos(strong impact window) > p_pos(background window) in >= 95% of
    1000 sampled pairs."""
    arc = pipe7["archive"]
    model, calib = pipe7["model"], pipe7["calibration"]
    size = 120
    strong = [t for t in arc.truth if abs(t.contrast) >= 0.15]
    hosts = []
    for imp in strong:
        for obs in arc.observations:
            if obs.acquired_at <= imp.time:
                continue
            px = impact_pixel(obs, imp)
            if px is not None:
                hosts.append((obs, px))
    assert len(hosts) >= 20
    rng = np.random.default_rng(123)
    impact_centers = {
        obs.id: [impact_pixel(obs, t) for t in arc.truth if impact_pixel(obs, t)]
        for obs in arc.observations
    }
    wins = 0
    for _ in range(1000):
        obs, (r, c) = hosts[int(rng.integers(len(hosts)))]
        r0 = min(max(r - size // 2, 0), obs.height - size)
        c0 = min(max(c - size // 2, 0), obs.width - size)
        z_imp = score_window(model, obs.pixels[r0:r0 + size, c0:c0 + size], size).z_pos
        for _ in range(200):
            br = int(rng.integers(0, obs.height - size + 1))
            bc = int(rng.integers(0, obs.width - size + 1))
            if not any(br <= ir < br + size and bc <= ic < bc + size
                       for ir, ic in impact_centers[obs.id]):
                break
        z_bg = score_window(model, obs.pixels[br:br + size, bc:bc + size], size).z_pos
        z = np.array([[0.0, z_imp], [0.0, z_bg]])
        p = calibrated_probs(calib, z)[:, 1]
        wins += p[0] > p[1]
    assert wins >= 950


def test_build_labeled_set_balance_and_labels(arc7):
    windows = build_labeled_set(arc7.observations, arc7.truth, rng_seed=1, size=120,
                                negatives_per_positive=2.0)
    n_pos = sum(1 for w in windows if w.label == POSITIVE)
    n_neg = len(windows) - n_pos
    assert n_pos > 0
    assert n_neg == pytest.approx(2.0 * n_pos, rel=0.05)
    assert all(w.pixels.shape == (120, 120) for w in windows)
