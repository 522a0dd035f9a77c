from __future__ import annotations

import math

import numpy as np
import pytest

from data.simulator import empirical_autocov
from sdde.config import SolverSettings
from sdde.estimator_service import EstimatorService, estimator_service
from sdde.exceptions import DataError, NonIdentifiableError, NonStationaryModelError
from sdde.likelihood import pseudo_loglik, pseudo_score
from sdde.model import ExpKernel, MultiDelay, ParameterBinding, TwoDelay
from sdde.predictor import coefficients_for


@pytest.fixture(scope="module")
def pseudo_fit(middle_series):
    model = TwoDelay(a=-1.0, b=-0.1353, r=1.0, sigma=1.0)
    return estimator_service.estimate(middle_series, model, ParameterBinding.of("a", "b"), 3)


def test_pseudo_ml_solves_the_score_equation(pseudo_fit, middle_series, middle_model, ab_binding):
    assert pseudo_fit.converged
    assert pseudo_fit.param_names == ("a", "b")
    assert pseudo_fit.method == "pseudo-ML" and pseudo_fit.k == 3 and pseudo_fit.n == 200
    _, coeffs = coefficients_for(pseudo_fit.model, 1.0, 3, ab_binding)
    score = pseudo_score(middle_series, coeffs)
    assert np.linalg.norm(score) / (middle_series.n - 3) < 1e-6
    assert -2.0 < pseudo_fit.theta_hat[0] < 0.0
    assert -1.0 < pseudo_fit.theta_hat[1] < 1.0


def test_pseudo_ml_reports_sandwich_errors(pseudo_fit):
    cov = pseudo_fit.covariance
    np.testing.assert_allclose(cov, cov.T)
    assert np.all(np.linalg.eigvalsh(cov) > 0)
    np.testing.assert_allclose(pseudo_fit.stderr, np.sqrt(np.diag(cov)))
    # n = 200 puts the standard errors near 0.1
    assert np.all((pseudo_fit.stderr > 0.02) & (pseudo_fit.stderr < 0.5))
    assert pseudo_fit.truncation is not None and not pseudo_fit.boundary


def test_pseudo_ml_beats_nearby_points(pseudo_fit, middle_series, middle_model, ab_binding):
    best = pseudo_loglik(middle_series, coefficients_for(pseudo_fit.model, 1.0, 3)[1])
    for shift in ([0.02, 0.0], [0.0, 0.02], [-0.02, 0.0], [0.0, -0.02]):
        moved = ab_binding.apply(middle_model, pseudo_fit.theta_hat + np.array(shift))
        assert pseudo_loglik(middle_series, coefficients_for(moved, 1.0, 3)[1]) < best


def test_estimates_are_deterministic(middle_series, middle_model, b_binding):
    first = estimator_service.estimate(middle_series, middle_model, b_binding, 2)
    second = EstimatorService().estimate(middle_series, middle_model, b_binding, 2)
    np.testing.assert_array_equal(first.theta_hat, second.theta_hat)


def test_optimal_close_to_pseudo(pseudo_fit, middle_series, middle_model, ab_binding):
    optimal = estimator_service.estimate(middle_series, middle_model, ab_binding, 3, "optimal-PBEF")
    assert optimal.converged and optimal.method == "optimal-PBEF"
    assert np.all(np.abs(optimal.theta_hat - pseudo_fit.theta_hat) < 3 * pseudo_fit.stderr)
    assert np.all(np.diag(optimal.covariance) <= np.diag(pseudo_fit.covariance) * 1.1)


def test_two_step_from_pilot(pseudo_fit, middle_series, middle_model, ab_binding):
    result = estimator_service.solve_two_step(middle_series, middle_model, ab_binding, 3, pseudo_fit)
    assert result.converged and result.method == "two-step"
    assert np.all(np.abs(result.theta_hat - pseudo_fit.theta_hat) < 3 * pseudo_fit.stderr)


def test_moment_pilot_lands_in_region(middle_series, middle_model, ab_binding):
    pilot = estimator_service.moment_pilot(middle_series, middle_model, ab_binding)
    assert pilot.method == "moment"
    assert estimator_service.admissible(middle_model, ab_binding, pilot.theta_hat) is not None
    assert np.all(np.isnan(pilot.stderr))


def test_start_outside_region_rejected(middle_series, middle_model, ab_binding):
    with pytest.raises(NonStationaryModelError):
        estimator_service.estimate(middle_series, middle_model, ab_binding, 1, init=[-1.0, -2.5])


def test_bad_inputs(middle_series, middle_model, ab_binding):
    with pytest.raises(DataError):
        estimator_service.estimate(np.asarray(middle_series.x), middle_model, ab_binding, 1)
    short = middle_series.model_copy(update={"x": np.asarray(middle_series.x[:3])})
    with pytest.raises(DataError):
        estimator_service.estimate(short, middle_model, ab_binding, 3)
    with pytest.raises(ValueError):
        estimator_service.estimate(middle_series, middle_model, ab_binding, 1, method="bogus")


def test_result_frame(pseudo_fit):
    frame = pseudo_fit.to_frame(seed=9)
    assert list(frame["param"]) == ["a", "b"]
    assert list(frame.columns) == [
        "param", "estimate", "stderr", "converged", "iterations", "method", "k", "delta", "n", "seed",
    ]
    assert set(frame["seed"]) == {9}


@pytest.mark.slow
def test_exact_ml_near_pseudo(pseudo_fit, middle_series, middle_model, ab_binding):
    exact = estimator_service.estimate(middle_series, middle_model, ab_binding, 3, "exact-ML")
    assert exact.method == "exact-ML"
    assert np.all(np.isnan(exact.stderr))
    assert np.all(np.abs(exact.theta_hat - pseudo_fit.theta_hat) < 2 * pseudo_fit.stderr)


def test_exact_ml_leaves_settings_alone(middle_series, middle_model, b_binding):
    service = EstimatorService()
    before = service.settings
    short = middle_series.model_copy(update={"x": np.asarray(middle_series.x[:40])})
    service.estimate(short, middle_model, b_binding, 1, "exact-ML")
    assert service.settings is before
    assert service.settings == SolverSettings()


def test_zero_m2_optimal_reproduces_pseudo_ml(pseudo_fit, middle_series, middle_model, ab_binding):
    start = pseudo_fit.theta_hat + np.array([0.05, -0.05])
    result = estimator_service.solve_optimal(middle_series, middle_model, ab_binding, 3, init=start, route="zero")
    assert result.converged
    np.testing.assert_allclose(result.theta_hat, pseudo_fit.theta_hat, atol=1e-5)


def test_two_step_rejects_rank_deficient_weights(pseudo_fit, middle_series, middle_model, ab_binding):
    with pytest.raises(NonIdentifiableError):
        estimator_service.solve_two_step(middle_series, middle_model, ab_binding, 3, pseudo_fit, A=np.ones((2, 4)))


def test_sign_flip_gives_the_same_estimate(pseudo_fit, middle_series, middle_model, ab_binding):
    flipped = estimator_service.estimate(middle_series.scaled(-1.0), middle_model, ab_binding, 3)
    np.testing.assert_allclose(flipped.theta_hat, pseudo_fit.theta_hat, rtol=0, atol=1e-8)


def test_scaling_data_scales_sigma_only(middle_series, middle_model):
    binding = ParameterBinding.of("a", "b", "sigma")
    c = 2.0
    base = estimator_service.estimate(middle_series, middle_model, binding, 3, init=[-1.0, -0.1353, 1.0])
    scaled = estimator_service.estimate(middle_series.scaled(c), middle_model, binding, 3, init=[-1.0, -0.1353, c])
    assert base.converged and scaled.converged
    np.testing.assert_allclose(scaled.theta_hat[:2], base.theta_hat[:2], atol=1e-5)
    assert scaled.theta_hat[2] == pytest.approx(c * base.theta_hat[2], rel=1e-5)


def test_ou_start_takes_the_rate_from_lag_one(middle_series, middle_model, ab_binding):
    K = empirical_autocov(middle_series, 1).values
    rate = -math.log(K[1] / K[0])
    np.testing.assert_allclose(estimator_service.ou_start(middle_series, middle_model, ab_binding), [-rate, 0.0])
    sigma = estimator_service.ou_start(middle_series, middle_model, ParameterBinding.of("sigma"))
    assert sigma[0] == pytest.approx(math.sqrt(2 * rate * K[0]))


def test_ou_start_for_multi_delay_and_kernel(middle_series):
    multi = MultiDelay(alphas=(-1.0, -0.2), delays=(0.0, 1.0), sigma=1.0)
    start = estimator_service.ou_start(middle_series, multi, ParameterBinding.of("alphas.0", "alphas.1"))
    assert start[0] < 0 and start[1] == 0.0
    delayed_only = MultiDelay(alphas=(-1.0,), delays=(0.5,), sigma=1.0)
    assert estimator_service.ou_start(middle_series, delayed_only, ParameterBinding.of("alphas.0")) is None
    kernel = ExpKernel(a=1.0, b=1.0, r=1.0, sigma=1.0)
    assert estimator_service.ou_start(middle_series, kernel, ParameterBinding.of("b")) is None
