import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msscab.bandselect import (
    LabeledSpectra,
    LdaModel,
    SamplingError,
    class_spectra_stats,
    confusion_matrix,
    fisher_criterion,
    fit_lda,
    lda_confusion,
    pooled_within_covariance,
    rank_channels,
    rank_wavelengths,
    sample_pixels,
)
from msscab.cube import BACKGROUND, LEAF, SCAB, WAVELENGTHS

import oracles


def gaussian_data(rng, n, mu0, mu1, sd):
    d = len(mu0)
    X0 = mu0 + rng.normal(size=(n, d)) * sd
    X1 = mu1 + rng.normal(size=(n, d)) * sd
    return LabeledSpectra(np.vstack([X0, X1]), np.repeat([0, 1], n))


def test_single_informative_band_ranks_first():
    rng = np.random.default_rng(0)
    mu0 = np.zeros(8)
    mu1 = np.zeros(8)
    mu1[6] = 2.0
    model = fit_lda(gaussian_data(rng, 4000, mu0, mu1, 1.0))
    assert model.ranking[0] == 779
    assert model.weights[6] > 0.8
    assert model.weights.sum() == pytest.approx(1.0, abs=1e-15)


def test_two_dimensional_symmetric_case():
    # isotropic covariance, mean gap along (1, 1): both bands weigh 1/2
    X0 = np.array([[-1, -1], [1, -1], [-1, 1], [1, 1]], dtype=float)
    X1 = X0 + 3.0
    data = LabeledSpectra(np.vstack([X0, X1]), [0] * 4 + [1] * 4)
    model = fit_lda(data, wavelengths=(545, 579), ridge_factor=0.0)
    # S0 + S1 = 8 I over n - 2 = 6, so Sw = (4/3) I and w = (3/4) * (3, 3)
    assert np.allclose(model.direction, [9 / 4, 9 / 4], rtol=1e-14)
    assert np.allclose(model.weights, [0.5, 0.5])
    assert model.ranking == (545, 579)  # tie -> shorter wavelength first
    assert model.bias == pytest.approx(-0.5 * (9 / 4) * 6.0)


def test_direction_matches_linear_solve_oracle():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(8, 8))
    data = gaussian_data(rng, 3000, rng.normal(size=8), rng.normal(size=8), 1.0)
    data = LabeledSpectra(data.vectors @ A, data.labels)
    X0, X1 = data.class_vectors(0), data.class_vectors(1)
    sw = ((X0 - X0.mean(0)).T @ (X0 - X0.mean(0)) + (X1 - X1.mean(0)).T @ (X1 - X1.mean(0))) / (len(data) - 2)
    assert np.allclose(pooled_within_covariance(data), sw, rtol=1e-12)
    ridge = 1e-9 * np.trace(sw) / 8
    w_ridge = np.linalg.solve(sw + ridge * np.eye(8), X1.mean(0) - X0.mean(0))
    model = fit_lda(data)
    assert np.allclose(model.direction, w_ridge, rtol=1e-10)
    raw = fit_lda(data, ridge_factor=0.0)
    assert np.allclose(raw.direction, np.linalg.solve(sw, X1.mean(0) - X0.mean(0)), rtol=1e-12)


def test_priors_shift_the_bias():
    rng = np.random.default_rng(2)
    data = gaussian_data(rng, 500, np.zeros(8), np.ones(8), 1.0)
    a = fit_lda(data)
    b = fit_lda(data, priors=(0.2, 0.8))
    assert b.bias - a.bias == pytest.approx(np.log(4.0))


def test_degenerate_inputs():
    X = np.ones((10, 8))
    with pytest.raises(ValueError):
        fit_lda(LabeledSpectra(X, np.zeros(10, dtype=int)))
    with pytest.raises(np.linalg.LinAlgError):
        fit_lda(LabeledSpectra(X, np.repeat([0, 1], 5)), ridge_factor=0.0)
    with pytest.raises(ValueError):
        LabeledSpectra(np.ones((3, 8)), [0, 1, 2])


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_ranking_invariant_to_global_scale(seed, a):
    rng = np.random.default_rng(seed)
    data = gaussian_data(rng, 300, rng.normal(size=8), rng.normal(size=8), rng.uniform(0.5, 2.0, size=8))
    base = fit_lda(data)
    scaled = fit_lda(LabeledSpectra(data.vectors * a, data.labels))
    assert np.allclose(base.weights, scaled.weights, rtol=1e-8, atol=1e-12)
    assert np.allclose(base.direction, scaled.direction * a, rtol=1e-8)


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_label_swap_negates_direction(seed):
    rng = np.random.default_rng(seed)
    data = gaussian_data(rng, 300, rng.normal(size=8), rng.normal(size=8), 1.0)
    a = fit_lda(data)
    b = fit_lda(LabeledSpectra(data.vectors, 1 - data.labels))
    assert np.allclose(a.direction, -b.direction, rtol=1e-12)
    assert np.array_equal(a.weights, b.weights)
    assert a.ranking == b.ranking


def test_fisher_direction_is_optimal():
    rng = np.random.default_rng(3)
    data = gaussian_data(rng, 2000, rng.normal(size=8), rng.normal(size=8), rng.uniform(0.3, 2.0, size=8))
    best = fisher_criterion(data, fit_lda(data, ridge_factor=0.0).direction)
    for v in rng.normal(size=(1000, 8)):
        assert fisher_criterion(data, v) <= best * (1 + 1e-12)


def test_ranking_fixtures():
    assert rank_wavelengths([0.125] * 8) == WAVELENGTHS
    assert rank_wavelengths([0.1, 0.3, 0.3, 0.0, 0.1, 0.1, 0.05, 0.05]) == (579, 622, 545, 701, 737, 779, 816, 658)


def test_ranking_against_sort_oracle():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        w = rng.integers(0, 5, size=8) / 4.0  # coarse values force ties
        pairs = list(zip(w, WAVELENGTHS))
        # selection sort: largest weight, then smallest wavelength among equals
        expected = []
        while pairs:
            pick = max(pairs, key=lambda t: (t[0], -t[1]))
            expected.append(pick[1])
            pairs.remove(pick)
        assert rank_wavelengths(w) == tuple(expected)


def test_confusion_counting_oracle():
    rng = np.random.default_rng(5)
    true = rng.integers(0, 2, size=500)
    pred = rng.integers(0, 2, size=500)
    cm = confusion_matrix(true, pred)
    for i in (0, 1):
        n_i = sum(1 for t in true if t == i)
        for j in (0, 1):
            assert cm[i, j] == sum(1 for t, p in zip(true, pred) if t == i and p == j) / n_i
    assert np.all(np.abs(cm.sum(axis=1) - 1) <= 1e-12)
    with pytest.raises(ValueError):
        confusion_matrix(np.zeros(4, dtype=int), np.zeros(4, dtype=int))


def test_well_separated_confusion_is_diagonal():
    rng = np.random.default_rng(6)
    data = gaussian_data(rng, 1000, np.zeros(8), np.full(8, 3.0), 1.0)
    held = gaussian_data(rng, 1000, np.zeros(8), np.full(8, 3.0), 1.0)
    cm = lda_confusion(fit_lda(data), held)
    assert cm[0, 0] >= 0.99 and cm[1, 1] >= 0.99


def test_model_json_round_trip():
    rng = np.random.default_rng(7)
    model = fit_lda(gaussian_data(rng, 200, np.zeros(8), np.ones(8), 1.0))
    back = LdaModel.from_json(json.loads(json.dumps(model.to_json())))
    assert np.array_equal(back.direction, model.direction)
    assert np.array_equal(back.weights, model.weights)
    assert back.ranking == model.ranking == rank_channels(back)
    assert back.bias == model.bias


def test_class_stats_match_two_pass_oracle():
    rng = np.random.default_rng(8)
    data = gaussian_data(rng, 1000, rng.normal(size=8), rng.normal(size=8), 0.1)
    stats = class_spectra_stats(data)
    for c, name in ((0, "leaf"), (1, "scab")):
        mean, sd = oracles.two_pass_stats(data.class_vectors(c))
        assert np.allclose(stats[name]["mean"], mean, rtol=1e-13)
        assert np.allclose(stats[name]["sd"], sd, rtol=1e-12)
        assert stats[name]["n"] == 1000


# --- sampling -----------------------------------------------------------------
def labelled_scene(rng, h, w, n_scab):
    planes = rng.random((8, h, w))
    labels = np.full((h, w), LEAF, dtype=np.uint8)
    labels[:2, :] = BACKGROUND
    flat = labels.ravel()
    candidates = np.flatnonzero(flat == LEAF)
    flat[rng.choice(candidates, n_scab, replace=False)] = SCAB
    return planes, flat.reshape(h, w)


def test_sampling_is_balanced_and_correct():
    rng = np.random.default_rng(9)
    sources = []
    for i in range(3):
        planes, labels = labelled_scene(rng, 20, 20, 30)
        sources.append((f"s{i}", planes, labels))
    data = sample_pixels(sources, 50, seed=1)
    assert (data.labels == 0).sum() == 50 and (data.labels == 1).sum() == 50
    lookup = {sid: (p, m) for sid, p, m in sources}
    for vec, lab, sid in zip(data.vectors, data.labels, data.scene_ids):
        planes, mask = lookup[sid]
        hits = np.flatnonzero(np.all(planes.reshape(8, -1).T == vec, axis=1))
        assert len(hits) == 1
        assert mask.ravel()[hits[0]] == (SCAB if lab == 1 else LEAF)
    # without replacement
    assert len({tuple(v) for v in data.vectors}) == 100


def test_sampling_determinism_and_exhaustion():
    rng = np.random.default_rng(10)
    planes, labels = labelled_scene(rng, 30, 30, 40)
    src = [("s", planes, labels)]
    a = sample_pixels(src, 40, seed=5)
    b = sample_pixels(src, 40, seed=5)
    c = sample_pixels(src, 40, seed=6)
    assert np.array_equal(a.vectors, b.vectors)
    assert np.array_equal(np.sort(a.vectors[a.labels == 1], axis=0), np.sort(c.vectors[c.labels == 1], axis=0))
    assert not np.array_equal(a.vectors[a.labels == 0], c.vectors[c.labels == 0])
    with pytest.raises(SamplingError, match="only 40"):
        sample_pixels(src, 41, seed=5)


def test_sampling_at_full_scale():
    rng = np.random.default_rng(11)
    sources = []
    for i in range(2):
        planes = rng.random((8, 300, 300)).astype(np.float32)
        labels = np.where(rng.random((300, 300)) < 0.5, LEAF, SCAB).astype(np.uint8)
        sources.append((f"s{i}", planes, labels))
    data = sample_pixels(sources, 45_000, seed=0)
    assert len(data) == 90_000
    assert (data.labels == 1).sum() == 45_000
    assert set(data.scene_ids) == {"s0", "s1"}
