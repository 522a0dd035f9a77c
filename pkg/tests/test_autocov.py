from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.linalg import toeplitz

from sdde.autocov import (
    AutocovGrid,
    autocov_grad,
    autocov_grid,
    boundary_residual,
    closed_form_expkernel_a0,
    closed_form_two_delay,
    closed_form_zero_a,
    covariance_function,
    is_toeplitz_pd,
    numerical_autocov,
    ou_autocov,
    ou_autocov_grad,
    resolve_method,
    toeplitz_matrix,
    two_delay_covariance,
    yw_residual,
)
from sdde.exceptions import InsufficientGridError, ModelSpecError, NonStationaryModelError
from sdde.model import ExpKernel, MultiDelay, ParameterBinding, TwoDelay

OU = TwoDelay(a=-1.0, b=0.0, r=1.0, sigma=1.0)

AGREEMENT_MODELS = [
    TwoDelay(a=-1.0, b=0.95, r=1.0, sigma=1.0),
    TwoDelay(a=-1.0, b=-0.1353, r=1.0, sigma=1.0),
    TwoDelay(a=-1.0, b=-2.1, r=1.0, sigma=1.0),
    TwoDelay(a=0.0, b=-0.1353, r=1.0, sigma=1.0),
    TwoDelay(a=-1.0, b=-1.0, r=1.0, sigma=1.0),
]


def test_ou_values():
    grid = autocov_grid(OU, 0.5, 8)
    np.testing.assert_allclose(grid.values, 0.5 * np.exp(-grid.lags), rtol=1e-10)
    assert grid.method == "closed-form"


def test_degenerate_branch_variance():
    assert closed_form_two_delay(TwoDelay(a=-1.0, b=-1.0, r=1.0, sigma=1.0), 0.0) == pytest.approx(0.5, rel=1e-12)


def test_zero_a_variance_from_both_formulas():
    model = TwoDelay(a=0.0, b=-0.1353, r=1.0, sigma=1.0)
    assert closed_form_zero_a(model, 0.0) == pytest.approx(4.2327, abs=1e-4)
    assert closed_form_two_delay(model, 0.0) == pytest.approx(closed_form_zero_a(model, 0.0), abs=1e-10)


def test_zero_a_second_interval_matches_continuation():
    model = TwoDelay(a=0.0, b=-0.1353, r=1.0, sigma=1.0)
    t = np.linspace(0.0, 2.0, 17)
    np.testing.assert_allclose(closed_form_zero_a(model, t), closed_form_two_delay(model, t), atol=1e-8)
    with pytest.raises(ValueError):
        closed_form_zero_a(model, 2.5)


@pytest.mark.parametrize("model", AGREEMENT_MODELS, ids=lambda m: f"a={m.a},b={m.b}")
def test_closed_form_and_spectral_agree(model):
    t = np.linspace(0.0, 2 * model.r, 21)
    closed = closed_form_two_delay(model, t)
    numerical = covariance_function(model, "numerical")(t)
    np.testing.assert_allclose(numerical, closed, atol=1e-6)


@pytest.mark.parametrize("model", AGREEMENT_MODELS[:3], ids=["upper", "middle", "lower"])
def test_closed_form_solves_delay_yule_walker(model):
    t = np.linspace(0.1, 3 * model.r, 30)
    residual = yw_residual(covariance_function(model), model, t)
    assert np.max(np.abs(residual)) < 1e-6
    assert abs(boundary_residual(covariance_function(model), model)) < 1e-8


def test_ou_residual_is_tiny():
    t = np.linspace(0.05, 3.0, 25)
    residual = yw_residual(lambda s: ou_autocov(-1.0, 1.0, s), OU, t)
    assert np.max(np.abs(residual)) < 1e-8


def test_expkernel_zero_a_closed_form():
    model = ExpKernel(a=0.0, b=1.0, r=1.0, sigma=1.0)
    t = np.linspace(0.0, 1.0, 11)
    closed = closed_form_expkernel_a0(model, t)
    np.testing.assert_allclose(covariance_function(model)(t), closed, atol=1e-6)
    assert abs(boundary_residual(lambda s: closed_form_expkernel_a0(model, s), model)) < 1e-8


def test_multi_delay_two_atom_uses_closed_form(middle_model):
    multi = middle_model.to_multi()
    assert resolve_method(multi) == "closed-form"
    np.testing.assert_allclose(
        autocov_grid(multi, 1.0, 5).values, autocov_grid(middle_model, 1.0, 5).values, rtol=1e-14
    )


def test_three_atom_model_uses_spectral_route():
    model = MultiDelay(alphas=(-1.0, -0.2, -0.1), delays=(0.0, 0.5, 1.0), sigma=1.0)
    grid = autocov_grid(model, 0.5, 6)
    assert grid.method == "numerical"
    assert is_toeplitz_pd(grid)
    residual = yw_residual(grid, model, np.array([0.3, 0.7, 1.6, 2.2]))
    assert np.max(np.abs(residual)) < 1e-6


def test_resolve_method_errors():
    with pytest.raises(ModelSpecError):
        resolve_method(ExpKernel(a=0.0, b=1.0, r=1.0, sigma=1.0), "closed-form")
    with pytest.raises(ModelSpecError):
        resolve_method(OU, "bogus")


def test_nonstationary_model_rejected():
    with pytest.raises(NonStationaryModelError):
        autocov_grid(TwoDelay(a=-1.0, b=-2.3, r=1.0, sigma=1.0), 1.0, 3)


def test_values_decay(reference_model):
    grid = autocov_grid(reference_model, 1.0, 200)
    assert abs(grid.values[-1]) < 0.05 * grid.values[0]
    assert np.max(np.abs(grid.values[1:])) < grid.values[0]
    assert is_toeplitz_pd(grid, 20)


def test_grid_views(middle_model):
    grid = autocov_grid(middle_model, 0.5, 6)
    np.testing.assert_array_equal(grid.kappa(3), grid.values[1:4])
    np.testing.assert_array_equal(toeplitz_matrix(grid, 4), toeplitz(grid.values[:4]))
    np.testing.assert_array_equal(toeplitz_matrix(np.asarray(grid.values), 3), grid.toeplitz(3))
    with pytest.raises(InsufficientGridError):
        grid.require(7)
    with pytest.raises(InsufficientGridError):
        toeplitz_matrix(np.ones(2), 3)
    with pytest.raises(ValueError):
        grid.values[0] = 1.0


def test_non_pd_values_detected():
    assert not is_toeplitz_pd(np.array([1.0, 1.2]))
    assert is_toeplitz_pd(np.array([1.0, 0.5, 0.25]))


def test_ou_gradient_matches_analytic():
    binding = ParameterBinding.of("a")
    grads = autocov_grad(OU, binding, 0.5, 8)
    expected = ou_autocov_grad(-1.0, 1.0, 0.5 * np.arange(9))
    np.testing.assert_allclose(grads[0], expected, rtol=1e-6, atol=1e-10)


def test_parameter_without_effect_has_zero_row():
    grads = autocov_grad(OU, ParameterBinding.of("r"), 0.5, 6)
    np.testing.assert_allclose(grads, 0.0, atol=1e-8)


def test_sigma_gradient_is_two_k_over_sigma(middle_model):
    grid = autocov_grid(middle_model, 1.0, 5, binding=ParameterBinding.of("sigma"))
    np.testing.assert_allclose(grid.grads[0], 2 * grid.values / middle_model.sigma, rtol=1e-7)
    assert grid.param_names == ("sigma",)


def test_one_sided_gradient_at_box_edge():
    model = TwoDelay(a=-1.0, b=0.5, r=1.0, sigma=1.0)
    binding = ParameterBinding(params=[{"path": "b", "lower": 0.5, "upper": 0.9}])
    grid = autocov_grid(model, 1.0, 3, binding=binding)
    assert grid.flags == ("one-sided:b",)
    central = autocov_grad(model, ParameterBinding.of("b"), 1.0, 3)
    np.testing.assert_allclose(grid.grads, central, rtol=1e-4, atol=1e-6)
    assert math.isfinite(float(grid.grads.sum()))


def test_numerical_grid_matches_closed_grid(middle_model):
    numerical = numerical_autocov(middle_model, 0.5, 4)
    assert numerical.method == "numerical"
    np.testing.assert_allclose(numerical.values, autocov_grid(middle_model, 0.5, 4).values, atol=1e-6)


def test_variance_near_the_b_equals_minus_a_line():
    # lambda is below the degenerate cutoff but b is far from a
    model = TwoDelay(a=-1e-9, b=5e-10, r=1.0, sigma=1.0)
    k0 = two_delay_covariance(model).k0
    assert k0 > 0
    assert k0 == pytest.approx((model.b - 1) / (2 * (model.a + model.b)), rel=1e-6)


def test_grid_copies_the_caller_array(middle_model):
    values = np.array([1.0, 0.5, 0.25])
    grid = AutocovGrid(delta=1.0, values=values, model=middle_model, method="closed-form")
    assert values.flags.writeable
    values[0] = 7.0
    assert grid.values[0] == 1.0
    assert not grid.values.flags.writeable
