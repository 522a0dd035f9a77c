from __future__ import annotations

import numpy as np
import pytest

from sdde.autocov import autocov_grid, ou_autocov, ou_autocov_grad
from sdde.exceptions import IllConditionedLadderError, SingularSystemError
from sdde.model import TwoDelay
from sdde.predictor import (
    coefficients_for,
    direct_solve,
    durbin_levinson,
    durbin_levinson_grad,
    levinson_ladder,
)


def _mixture_autocov(rng, m: int) -> np.ndarray:
    """Positive mixtures of AR(1) autocovariances are positive definite."""
    weights = rng.uniform(0.2, 1.0, size=3)
    rhos = rng.uniform(-0.9, 0.9, size=3)
    return np.array([np.sum(weights * rhos**j) for j in range(m + 1)])


def test_depth_one():
    values = np.array([2.0, 0.8, 0.1])
    coeffs = durbin_levinson(values, 1)
    np.testing.assert_allclose(coeffs.phi, [0.4])
    assert coeffs.v == pytest.approx(2.0 * (1 - 0.16))


def test_white_noise_has_no_predictability():
    values = np.array([1.0, 0.0, 0.0, 0.0, 0.0])
    for k in range(1, 5):
        coeffs = durbin_levinson(values, k)
        np.testing.assert_array_equal(coeffs.phi, np.zeros(k))
        assert coeffs.v == 1.0
    phi, v = direct_solve(values, 3)
    np.testing.assert_array_equal(phi, np.zeros(3))


def test_ar1_autocovariance():
    values = 0.6 ** np.arange(4)
    coeffs = durbin_levinson(values, 2)
    np.testing.assert_allclose(coeffs.phi, [0.6, 0.0], atol=1e-15)
    assert coeffs.v == pytest.approx(0.64, abs=1e-15)


def test_ladder_identity_is_exact(middle_model):
    grid = autocov_grid(middle_model, 0.5, 9)
    coeffs = durbin_levinson(grid, 9)
    previous = grid.values[0]
    for phi, v in coeffs.ladder:
        assert v == previous * (1.0 - phi[-1] * phi[-1])
        assert abs(phi[-1]) < 1
        assert 0 < v <= previous
        previous = v
    np.testing.assert_array_equal(coeffs.partial_autocorrelations, [phi[-1] for phi, _ in coeffs.ladder])


@pytest.mark.parametrize("k", [1, 2, 5, 8])
def test_levinson_matches_direct_solve(rng, k):
    for _ in range(5):
        values = _mixture_autocov(rng, k)
        coeffs = durbin_levinson(values, k)
        phi, v = direct_solve(values, k)
        np.testing.assert_allclose(coeffs.phi, phi, rtol=1e-10, atol=1e-12)
        assert coeffs.v == pytest.approx(v, rel=1e-10)


@pytest.mark.parametrize("k", [1, 3, 5, 9])
def test_levinson_matches_direct_solve_on_model_grids(reference_model, k):
    grid = autocov_grid(reference_model, 1.0, k)
    coeffs = durbin_levinson(grid, k)
    phi, v = direct_solve(grid, k)
    np.testing.assert_allclose(coeffs.phi, phi, rtol=1e-10, atol=1e-12)
    assert coeffs.v == pytest.approx(v, rel=1e-10)
    assert coeffs.delta == 1.0


def test_streaming_ladder_starts_at_variance():
    levels = list(levinson_ladder(0.5 ** np.arange(4), 3))
    assert [i for i, _, _ in levels] == [0, 1, 2, 3]
    assert levels[0][1].size == 0 and levels[0][2] == 1.0


def test_degenerate_ladder_reports_level():
    with pytest.raises(IllConditionedLadderError) as info:
        durbin_levinson(np.array([1.0, 1.0, 1.0]), 2)
    assert info.value.level == 1
    with pytest.raises(IllConditionedLadderError) as info:
        durbin_levinson(np.array([1.0, 0.5]), 3)
    assert info.value.level == 0


def test_direct_solve_rejects_singular_system():
    with pytest.raises(SingularSystemError):
        direct_solve(np.array([1.0, 1.0, 1.0]), 2)


def test_depth_must_be_positive():
    with pytest.raises(ValueError):
        durbin_levinson(np.array([1.0, 0.5]), 0)


def test_constant_grid_has_zero_gradients():
    values = 0.5 ** np.arange(5)
    coeffs = durbin_levinson_grad(values, 4, grads=np.zeros((2, 5)))
    np.testing.assert_array_equal(coeffs.dphi, np.zeros((2, 4)))
    np.testing.assert_array_equal(coeffs.dv, np.zeros(2))


def test_ou_depth_one_derivative():
    delta = 0.7
    lags = delta * np.arange(2)
    values = ou_autocov(-1.0, 1.0, lags)
    grads = ou_autocov_grad(-1.0, 1.0, lags)[None, :]
    coeffs = durbin_levinson_grad(values, 1, grads=grads)
    assert coeffs.phi[0] == pytest.approx(np.exp(-delta), rel=1e-12)
    assert coeffs.dphi[0, 0] == pytest.approx(delta * np.exp(-delta), rel=1e-10)


def test_gradient_matches_finite_differences(middle_model, ab_binding):
    k, delta, h = 5, 1.0, 1e-5
    grid = autocov_grid(middle_model, delta, k, binding=ab_binding)
    coeffs = durbin_levinson_grad(grid, k)
    assert coeffs.param_names == ("a", "b")
    theta = ab_binding.theta(middle_model)
    for j in range(2):
        step = np.zeros(2)
        step[j] = h
        plus = durbin_levinson(autocov_grid(ab_binding.apply(middle_model, theta + step), delta, k), k)
        minus = durbin_levinson(autocov_grid(ab_binding.apply(middle_model, theta - step), delta, k), k)
        np.testing.assert_allclose(coeffs.dphi[j], (plus.phi - minus.phi) / (2 * h), rtol=1e-5, atol=1e-8)
        assert coeffs.dv[j] == pytest.approx((plus.v - minus.v) / (2 * h), rel=1e-5, abs=1e-8)


def test_gradient_primal_matches_plain_recursion(middle_model, ab_binding):
    grid = autocov_grid(middle_model, 1.0, 4, binding=ab_binding)
    full = durbin_levinson_grad(grid, 4)
    plain = durbin_levinson(grid, 4)
    np.testing.assert_array_equal(full.phi, plain.phi)
    assert full.v == plain.v


def test_coefficients_for_extends_grid(middle_model, ab_binding):
    grid, coeffs = coefficients_for(middle_model, 1.0, 3, ab_binding, m=40)
    assert grid.m == 40
    assert coeffs.k == 3 and coeffs.has_gradients and coeffs.p == 2
    grid, coeffs = coefficients_for(TwoDelay(a=-1.0, b=0.0, r=1.0, sigma=1.0), 1.0, 2)
    assert grid.m == 2 and not coeffs.has_gradients and coeffs.p == 0
