"""Exact Gaussian likelihood, depth-k pseudo-likelihood and pseudo-score."""

import logging
import math
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from sdde.autocov import autocov_grid
from sdde.exceptions import DataError
from sdde.model import DelayModelSpec, ParameterBinding
from sdde.predictor import PredictorCoefficients, levinson_ladder

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


class ObservationSeries(BaseModel):
    """Equidistant observations X(delta), ..., X(n delta)."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    delta: float = Field(gt=0)
    x: np.ndarray
    seed: Optional[int] = None
    model: Optional[DelayModelSpec] = None

    @field_validator("x", mode="before")
    @classmethod
    def _as_vector(cls, value):
        x = np.array(value, dtype=float)
        if x.ndim != 1:
            raise ValueError("observations must be a one-dimensional sequence")
        if len(x) < 2:
            raise ValueError("at least two observations are required")
        if not np.all(np.isfinite(x)):
            raise ValueError("observations must be finite")
        x.setflags(write=False)
        return x

    @classmethod
    def of(cls, x, delta: float, **provenance) -> "ObservationSeries":
        try:
            return cls(x=x, delta=delta, **provenance)
        except ValidationError as e:
            raise DataError(f"invalid observation series: {e}") from e

    @property
    def n(self) -> int:
        return len(self.x)

    def scaled(self, c: float) -> "ObservationSeries":
        return self.model_copy(update={"x": np.asarray(self.x) * c})


def _series_values(data) -> tuple[np.ndarray, Optional[float]]:
    if isinstance(data, ObservationSeries):
        return np.asarray(data.x), data.delta
    x = np.asarray(data, dtype=float).ravel()
    if len(x) < 1 or not np.all(np.isfinite(x)):
        raise DataError("observations must be a non-empty finite sequence")
    return x, None


# ==========================================
# EXACT LIKELIHOOD
# ==========================================
def exact_loglik(
    data: Union[ObservationSeries, np.ndarray],
    model: DelayModelSpec,
    binding: Optional[ParameterBinding] = None,
    theta=None,
    *,
    delta: Optional[float] = None,
    method: str = "auto",
) -> float:
    """Log-density of the whole series via the innovations form of Durbin-Levinson.

    With a binding and theta the model is first moved to theta.
    """
    x, series_delta = _series_values(data)
    delta = series_delta if series_delta is not None else delta
    if delta is None:
        raise DataError("a raw array needs the sampling interval delta")
    if binding is not None and theta is not None:
        model = binding.apply(model, theta)
    n = len(x)
    grid = autocov_grid(model, delta, n - 1, method=method)
    terms = np.empty(n)
    for i, phi, v in levinson_ladder(grid.values, n - 1):
        error = x[i] - phi @ x[i - 1 :: -1] if i > 0 else x[0]
        terms[i] = -0.5 * (LOG_2PI + math.log(v)) - error * error / (2 * v)
    return float(np.sum(terms))


# ==========================================
# PSEUDO-LIKELIHOOD
# ==========================================
def prediction_windows(
    data: Union[ObservationSeries, np.ndarray], coeffs: PredictorCoefficients
) -> tuple[np.ndarray, np.ndarray]:
    """Windows X_{i:i+1-k} (one row per i = k..n-1) and the prediction errors."""
    x, delta = _series_values(data)
    k = coeffs.k
    if len(x) <= k:
        raise DataError(f"depth {k} needs more than {k} observations, got {len(x)}")
    if delta is not None and coeffs.delta is not None and not math.isclose(delta, coeffs.delta):
        raise DataError(f"coefficients built for delta={coeffs.delta}, series has {delta}")
    windows = sliding_window_view(x[:-1], k)[:, ::-1]
    errors = x[k:] - windows @ coeffs.phi
    return windows, errors


def pseudo_loglik(data: Union[ObservationSeries, np.ndarray], coeffs: PredictorCoefficients) -> float:
    _, errors = prediction_windows(data, coeffs)
    v = coeffs.v
    return float(-0.5 * len(errors) * (LOG_2PI + math.log(v)) - np.sum(errors * errors) / (2 * v))


def pseudo_score(data: Union[ObservationSeries, np.ndarray], coeffs: PredictorCoefficients) -> np.ndarray:
    if not coeffs.has_gradients:
        raise ValueError("pseudo_score needs coefficients with parameter gradients")
    windows, errors = prediction_windows(data, coeffs)
    v = coeffs.v
    linear = coeffs.dphi @ (windows.T @ errors) / v
    quadratic = coeffs.dv * np.sum(errors * errors - v) / (2 * v * v)
    return linear + quadratic
