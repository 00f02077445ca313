import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpcrbo.benchmarks import example_1d
from gpcrbo.gpcr import (
    NO_THRESHOLD,
    HybridDataset,
    ThresholdPrior,
    estimate_threshold_map,
    estimate_threshold_ml,
    exact_predictive_density,
    fit,
    log_prob_stable,
    predict,
    prob_stable,
)
from gpcrbo.kernels import KernelSpec, NoiseSpec, kernel_matrix

from oracles import gp_regression


@pytest.fixture(scope="module")
def example():
    data, kernel, noise = example_1d()
    return data, kernel, noise, fit(data, kernel, noise, 2.03)


def test_example_dataset():
    data, kernel, noise = example_1d()
    np.testing.assert_array_equal(data.stable_y, [0.5, 2.0, 1.0])
    np.testing.assert_array_equal(data.unstable_x[:, 0], [0.7, 0.9])
    assert len(data) == 5
    assert kernel.variance == 0.5 and kernel.lengthscales == (0.2,) and noise.std_dev == 0.02


@pytest.mark.parametrize("seed", range(5))
def test_all_stable_reduces_to_gp_regression(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    n = int(rng.integers(1, 16))
    X, Xs = rng.random((n, d)), rng.random((50, d))
    y = rng.normal(size=n)
    kernel = KernelSpec.isometric(1.2, 0.4, d)
    model = fit(HybridDataset(X, y, np.zeros((0, d))), kernel, NoiseSpec(0.1))
    mean, var = gp_regression(X, y, Xs, 1.2, kernel.lengthscales, 0.01)
    pred = predict(model, Xs)
    np.testing.assert_allclose(pred.mean, mean, atol=1e-6)
    np.testing.assert_allclose(pred.variance, var, atol=1e-6)


def test_unstable_point_needs_finite_threshold():
    data = HybridDataset(np.zeros((0, 1)), np.zeros(0), [[0.5]])
    with pytest.raises(ValueError):
        fit(data, KernelSpec.isometric(1, 0.2, 1), NoiseSpec(0.1), NO_THRESHOLD)


def test_predict_matches_explicit_inverse_formula(example):
    data, kernel, _, model = example
    K = kernel_matrix(kernel, data.inputs)
    Xs = np.linspace(0, 1, 11)[:, None]
    Ks = kernel_matrix(kernel, data.inputs, Xs)
    Kinv = np.linalg.inv(K)
    mean = Ks.T @ Kinv @ model.ep.mean
    var = kernel.variance - np.einsum("ij,ik,kj->j", Ks, Kinv, Ks) + np.einsum("ij,ik,kl,lj->j", Ks, Kinv, model.ep.covariance, Kinv @ Ks)
    pred = predict(model, Xs)
    np.testing.assert_allclose(pred.mean, mean, atol=1e-6)
    np.testing.assert_allclose(pred.variance, var, atol=1e-6)


def test_unstable_points_push_mean_above_threshold(example):
    _, _, _, model = example
    pred = predict(model, [[0.8]])
    assert pred.mean[0] > 2.03
    p = prob_stable(model, [[0.3], [0.8], [10.0]])
    assert p[0] > 0.9 and p[1] < 0.3 and p[2] > 0.99


def test_posterior_cov_diagonal_matches_predict(example):
    _, _, _, model = example
    Xs = np.linspace(0, 1, 7)[:, None]
    np.testing.assert_allclose(np.diag(model.posterior_cov(Xs)), predict(model, Xs).variance, atol=1e-10)


def test_empty_model_is_prior():
    model = fit(HybridDataset.empty(2), KernelSpec.isometric(0.7, 0.3, 2), NoiseSpec(0.1))
    pred = predict(model, np.random.default_rng(0).random((4, 2)))
    np.testing.assert_array_equal(pred.mean, 0.0)
    np.testing.assert_array_equal(pred.variance, 0.7)


def test_ml_threshold_on_example():
    data, kernel, noise = example_1d()
    c = estimate_threshold_ml(data, kernel, noise, (0.0, 5.0))
    assert c == pytest.approx(2.03, abs=0.15)


def test_ml_edge_conventions():
    kernel, noise = KernelSpec.isometric(1, 0.3, 1), NoiseSpec(0.05)
    only_unstable = HybridDataset(np.zeros((0, 1)), np.zeros(0), [[0.2], [0.6]])
    only_stable = HybridDataset([[0.2]], [0.4], np.zeros((0, 1)))
    assert estimate_threshold_ml(only_unstable, kernel, noise, (-3, 3)) == 0.0
    assert estimate_threshold_ml(only_stable, kernel, noise, (-3, 3)) == 3.0
    with pytest.raises(ValueError):
        estimate_threshold_ml(only_stable, kernel, noise, (1, 1))


def test_map_wide_prior_matches_ml():
    data, kernel, noise = example_1d()
    ml = estimate_threshold_ml(data, kernel, noise, (0.0, 5.0))
    assert estimate_threshold_map(data, kernel, noise, ThresholdPrior(0.0, 1e6)) == pytest.approx(ml, abs=1e-3)


def test_map_tight_prior_returns_prior_mean():
    data, kernel, noise = example_1d()
    assert estimate_threshold_map(data, kernel, noise, ThresholdPrior(2.5, 1e-4)) == pytest.approx(2.5, abs=1e-3)


def test_map_respects_largest_stable_value():
    data, kernel, noise = example_1d()
    # prior far below the data: the window moves up to the stable maximum
    c = estimate_threshold_map(data, kernel, noise, ThresholdPrior(-10.0, 1.0))
    assert c >= 2.0


def test_map_without_stable_data_is_zero():
    data = HybridDataset(np.zeros((0, 1)), np.zeros(0), [[0.4]])
    assert estimate_threshold_map(data, KernelSpec.isometric(1, 0.3, 1), NoiseSpec(0.1), ThresholdPrior(3.0, 1.0)) == 0.0


def test_threshold_prior_validation():
    with pytest.raises(ValueError):
        ThresholdPrior(0.0, 0.0)


def test_exact_predictive_density_shape_and_normalization(example):
    _, _, _, model = example
    grid = np.linspace(-1, 3.5, 40)
    dens = exact_predictive_density(model, [0.8], grid)
    assert dens.shape == grid.shape
    assert dens.max() == pytest.approx(1.0)
    assert np.all(dens >= 0)
    # at an unstable input most of the mass sits above the threshold
    assert dens[grid > 2.03].sum() / dens.sum() > 0.8


def test_dataset_json_round_trip(example):
    data, kernel, noise, model = example
    again = HybridDataset.from_json(json.loads(json.dumps(data.to_json())))
    np.testing.assert_array_equal(again.inputs, data.inputs)
    np.testing.assert_array_equal(again.stable_y, data.stable_y)
    refit = fit(again, kernel, noise, 2.03)
    np.testing.assert_array_equal(refit.ep.mean, model.ep.mean)
    assert refit.ep.log_mass == model.ep.log_mass


def test_dataset_json_rejects_wrong_dimension():
    with pytest.raises(ValueError):
        HybridDataset.from_json({"dim": 2, "stable": [{"x": [0.1], "y": 1.0}], "unstable": []})


def test_dataset_growth():
    d = HybridDataset.empty(2).add_stable([0.1, 0.2], 1.0).add_unstable([0.5, 0.5])
    assert (d.n_stable, d.n_unstable, len(d)) == (1, 1, 2)
    np.testing.assert_array_equal(d.inputs, [[0.1, 0.2], [0.5, 0.5]])
    with pytest.raises(ValueError):
        HybridDataset([[0.1]], [1.0, 2.0], np.zeros((0, 1)))


def test_coincident_stable_and_unstable_points_still_fit():
    data = HybridDataset([[0.5]], [1.0], [[0.5]])
    model = fit(data, KernelSpec.isometric(1.0, 0.3, 1), NoiseSpec(0.01), 1.2)
    assert np.all(np.isfinite(model.ep.mean))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_prob_stable_is_a_probability(seed):
    rng = np.random.default_rng(seed)
    X = rng.random((5, 1))
    data = HybridDataset(X[:3], rng.normal(size=3), X[3:])
    model = fit(data, KernelSpec.isometric(1.0, 0.3, 1), NoiseSpec(0.05), float(data.stable_y.max() + 0.3))
    p = prob_stable(model, rng.random((30, 1)))
    assert np.all((p >= 0) & (p <= 1))


def test_log_prob_stable_matches_and_survives_underflow(example):
    _, _, _, model = example
    X = np.linspace(0, 1, 21)[:, None]
    np.testing.assert_allclose(np.exp(log_prob_stable(model, X)), prob_stable(model, X), rtol=1e-10, atol=1e-300)
    far = replace(model, threshold_estimate=-50.0)
    assert np.all(prob_stable(far, X) == 0.0)
    lp = log_prob_stable(far, X)
    assert np.all(np.isfinite(lp)) and np.all(lp < -100)
