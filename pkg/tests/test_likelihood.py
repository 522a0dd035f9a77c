from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal, norm

from data.simulator import SimConfig, sample_observations, simulate_path
from sdde.autocov import autocov_grid
from sdde.exceptions import DataError
from sdde.likelihood import (
    ObservationSeries,
    exact_loglik,
    prediction_windows,
    pseudo_loglik,
    pseudo_score,
)
from sdde.model import TwoDelay
from sdde.predictor import coefficients_for, durbin_levinson

OU = TwoDelay(a=-1.0, b=0.0, r=1.0, sigma=1.0)


def test_single_observation_is_marginal_density(middle_model):
    k0 = autocov_grid(middle_model, 1.0, 0).values[0]
    value = exact_loglik(np.array([0.7]), middle_model, delta=1.0)
    assert value == pytest.approx(norm(scale=math.sqrt(k0)).logpdf(0.7), rel=1e-12)


@pytest.mark.parametrize("n", [2, 10, 50])
def test_exact_matches_dense_gaussian(middle_series, middle_model, n):
    x = np.asarray(middle_series.x[:n])
    grid = autocov_grid(middle_model, 1.0, n - 1)
    dense = multivariate_normal(mean=np.zeros(n), cov=grid.toeplitz(n)).logpdf(x)
    assert exact_loglik(x, middle_model, delta=1.0) == pytest.approx(dense, rel=1e-8)


def test_sign_flip_invariance(middle_series, middle_model):
    flipped = middle_series.scaled(-1.0)
    assert exact_loglik(flipped, middle_model) == pytest.approx(exact_loglik(middle_series, middle_model), rel=1e-13)
    _, coeffs = coefficients_for(middle_model, 1.0, 3)
    assert pseudo_loglik(flipped, coeffs) == pytest.approx(pseudo_loglik(middle_series, coeffs), rel=1e-13)


def test_scaling_identity(middle_series, middle_model):
    c = 2.5
    scaled_model = middle_model.model_copy(update={"sigma": c})
    lhs = exact_loglik(middle_series.scaled(c), scaled_model)
    rhs = exact_loglik(middle_series, middle_model) - middle_series.n * math.log(c)
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_binding_moves_model_before_evaluation(middle_series, middle_model, ab_binding):
    moved = ab_binding.apply(middle_model, [-0.8, -0.3])
    assert exact_loglik(middle_series, middle_model, ab_binding, [-0.8, -0.3]) == exact_loglik(middle_series, moved)


def test_markov_pseudo_likelihood_is_exact_minus_first_term(middle_series):
    _, coeffs = coefficients_for(OU, 1.0, 1)
    first = norm(scale=math.sqrt(0.5)).logpdf(middle_series.x[0])
    assert pseudo_loglik(middle_series, coeffs) + first == pytest.approx(exact_loglik(middle_series, OU), rel=1e-10)


def test_pseudo_likelihood_by_hand(middle_series, middle_model):
    k = 3
    _, coeffs = coefficients_for(middle_model, 1.0, k)
    x = np.asarray(middle_series.x)
    total = 0.0
    for i in range(k, len(x)):
        error = x[i] - coeffs.phi @ x[i - 1 : i - k - 1 if i > k else None : -1]
        total += norm(scale=math.sqrt(coeffs.v)).logpdf(error)
    assert pseudo_loglik(middle_series, coeffs) == pytest.approx(total, rel=1e-10)


def test_windows_are_newest_first():
    coeffs = durbin_levinson(0.5 ** np.arange(3), 2)
    windows, errors = prediction_windows(np.arange(5.0), coeffs)
    np.testing.assert_array_equal(windows, [[1.0, 0.0], [2.0, 1.0], [3.0, 2.0]])
    assert errors.shape == (3,)


@pytest.mark.parametrize("k", [1, 3])
def test_score_matches_finite_differences(middle_series, middle_model, ab_binding, k):
    h = 1e-5
    theta = ab_binding.theta(middle_model)
    _, coeffs = coefficients_for(middle_model, 1.0, k, ab_binding)
    score = pseudo_score(middle_series, coeffs)
    for j in range(2):
        step = np.zeros(2)
        step[j] = h
        _, plus = coefficients_for(ab_binding.apply(middle_model, theta + step), 1.0, k)
        _, minus = coefficients_for(ab_binding.apply(middle_model, theta - step), 1.0, k)
        fd = (pseudo_loglik(middle_series, plus) - pseudo_loglik(middle_series, minus)) / (2 * h)
        assert score[j] == pytest.approx(fd, rel=1e-5, abs=1e-4)


def test_depth_must_be_below_sample_size(middle_model):
    _, coeffs = coefficients_for(middle_model, 1.0, 3)
    with pytest.raises(DataError):
        pseudo_loglik(np.array([0.1, 0.2, 0.3]), coeffs)


def test_interval_mismatch_rejected(middle_series, middle_model):
    _, coeffs = coefficients_for(middle_model, 0.5, 2)
    with pytest.raises(DataError):
        pseudo_loglik(middle_series, coeffs)


def test_score_needs_gradients(middle_series, middle_model):
    _, coeffs = coefficients_for(middle_model, 1.0, 2)
    with pytest.raises(ValueError):
        pseudo_score(middle_series, coeffs)


def test_series_validation():
    with pytest.raises(DataError):
        ObservationSeries.of([1.0, math.nan, 2.0], 1.0)
    with pytest.raises(DataError):
        ObservationSeries.of([1.0], 1.0)
    with pytest.raises(DataError):
        ObservationSeries.of([1.0, 2.0], 0.0)
    with pytest.raises(DataError):
        exact_loglik(np.ones(3), OU)
    series = ObservationSeries.of([1.0, 2.0, 3.0], 0.5, seed=4)
    assert series.n == 3 and series.seed == 4


@pytest.mark.parametrize("k", [1, 3, 5])
@pytest.mark.parametrize("c", [2.5, 0.4])
def test_pseudo_scaling_identity(middle_series, middle_model, k, c):
    _, coeffs = coefficients_for(middle_model, 1.0, k)
    _, scaled = coefficients_for(middle_model.model_copy(update={"sigma": c}), 1.0, k)
    lhs = pseudo_loglik(middle_series.scaled(c), scaled)
    rhs = pseudo_loglik(middle_series, coeffs) - (middle_series.n - k) * math.log(c)
    assert lhs == pytest.approx(rhs, rel=1e-10)


def _simulated_series(model, delta, n, seed, replications, step=0.01):
    for rep in range(replications):
        config = SimConfig(model=model, step=step, horizon=n * delta, seed=seed, replicate=(rep,))
        yield sample_observations(simulate_path(config), delta, n)


@pytest.mark.slow
def test_pseudo_score_has_zero_mean_at_the_truth(middle_model, ab_binding):
    replications = 400
    _, coeffs = coefficients_for(middle_model, 1.0, 2, ab_binding)
    scores = np.array(
        [pseudo_score(s, coeffs) for s in _simulated_series(middle_model, 1.0, 60, 11, replications, step=0.002)]
    )
    se = scores.std(axis=0, ddof=1) / math.sqrt(replications)
    assert np.all(np.abs(scores.mean(axis=0)) < 3 * se)


@pytest.mark.slow
def test_pseudo_likelihood_approaches_exact_with_depth():
    model = TwoDelay(a=-1.0, b=-2.1, r=1.0, sigma=1.0)
    depths = [1, 3, 5, 9]
    n = 200
    gaps = []
    for series in _simulated_series(model, 0.5, n, 23, 30):
        x = np.asarray(series.x)
        exact = exact_loglik(series, model)
        row = []
        for k in depths:
            _, coeffs = coefficients_for(model, 0.5, k)
            head = exact_loglik(x[:k], model, delta=0.5)
            row.append((exact - head - pseudo_loglik(series, coeffs)) / (n - k))
        gaps.append(row)
    gaps = np.array(gaps)
    mean = gaps.mean(axis=0)
    assert mean[-1] < mean[0]
    assert abs(mean[-1]) < abs(mean[0])
    for j in range(len(depths) - 1):
        step = gaps[:, j] - gaps[:, j + 1]
        se = step.std(ddof=1) / math.sqrt(len(step))
        assert mean[j + 1] < mean[j] + 3 * se
